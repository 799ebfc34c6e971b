use crate::relation::Comparator;

use super::PlanError;

#[derive(Debug, Clone, PartialEq)]
pub enum Tok {
    /// Identifier or keyword; `quoted` when written in backticks.
    Ident {
        text: String,
        quoted: bool,
    },
    Str(String),
    Number(String),
    Cmp(Comparator),
    Comma,
    LParen,
    RParen,
    Star,
    Semi,
    Eof,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub tok: Tok,
    pub line: usize,
    pub col: usize,
}

/// Characters that may close a string opened by `open`. A typographic
/// opener also accepts its ASCII counterpart.
fn closing_quotes(open: char) -> Option<&'static [char]> {
    match open {
        '\'' => Some(&['\'']),
        '"' => Some(&['"']),
        '\u{2018}' => Some(&['\u{2019}', '\'']),
        '\u{201C}' => Some(&['\u{201D}', '"']),
        _ => None,
    }
}

pub fn tokenize(src: &str) -> Result<Vec<Token>, PlanError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0, 1, 1);
    let err = |line, col, message: String| PlanError::Syntax { line, col, message };
    while i < chars.len() {
        let c = chars[i];
        let (tl, tc) = (line, col);
        let advance = |n: usize, i: &mut usize, line: &mut usize, col: &mut usize| {
            for _ in 0..n {
                if chars[*i] == '\n' {
                    *line += 1;
                    *col = 1;
                } else {
                    *col += 1;
                }
                *i += 1;
            }
        };
        if c.is_whitespace() {
            advance(1, &mut i, &mut line, &mut col);
            continue;
        }
        if c == '-' && chars.get(i + 1) == Some(&'-') {
            while i < chars.len() && chars[i] != '\n' {
                advance(1, &mut i, &mut line, &mut col);
            }
            continue;
        }
        let simple = match c {
            ',' => Some(Tok::Comma),
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            '*' => Some(Tok::Star),
            ';' => Some(Tok::Semi),
            _ => None,
        };
        if let Some(tok) = simple {
            advance(1, &mut i, &mut line, &mut col);
            out.push(Token {
                tok,
                line: tl,
                col: tc,
            });
            continue;
        }
        let two: String = chars[i..(i + 2).min(chars.len())].iter().collect();
        let cmp = match two.as_str() {
            "<=" => Some((Comparator::Le, 2)),
            ">=" => Some((Comparator::Ge, 2)),
            "!=" | "<>" => Some((Comparator::Ne, 2)),
            _ => match c {
                '=' => Some((Comparator::Eq, 1)),
                '<' => Some((Comparator::Lt, 1)),
                '>' => Some((Comparator::Gt, 1)),
                _ => None,
            },
        };
        if let Some((op, n)) = cmp {
            advance(n, &mut i, &mut line, &mut col);
            out.push(Token {
                tok: Tok::Cmp(op),
                line: tl,
                col: tc,
            });
            continue;
        }
        if let Some(close) = closing_quotes(c) {
            advance(1, &mut i, &mut line, &mut col);
            let mut s = String::new();
            loop {
                let Some(&d) = chars.get(i) else {
                    return Err(err(tl, tc, "unterminated string literal".into()));
                };
                if d == '\\' {
                    let Some(&e) = chars.get(i + 1) else {
                        return Err(err(line, col, "dangling escape at end of input".into()));
                    };
                    s.push(match e {
                        'n' => '\n',
                        't' => '\t',
                        other => other,
                    });
                    advance(2, &mut i, &mut line, &mut col);
                } else if close.contains(&d) {
                    advance(1, &mut i, &mut line, &mut col);
                    break;
                } else {
                    s.push(d);
                    advance(1, &mut i, &mut line, &mut col);
                }
            }
            out.push(Token {
                tok: Tok::Str(s),
                line: tl,
                col: tc,
            });
            continue;
        }
        if c == '`' {
            advance(1, &mut i, &mut line, &mut col);
            let mut s = String::new();
            loop {
                match chars.get(i) {
                    None => return Err(err(tl, tc, "unterminated quoted identifier".into())),
                    Some('\\') if chars.get(i + 1).is_some() => {
                        s.push(chars[i + 1]);
                        advance(2, &mut i, &mut line, &mut col);
                    }
                    Some('`') => {
                        advance(1, &mut i, &mut line, &mut col);
                        break;
                    }
                    Some(&d) => {
                        s.push(d);
                        advance(1, &mut i, &mut line, &mut col);
                    }
                }
            }
            if s.is_empty() {
                return Err(err(tl, tc, "empty quoted identifier".into()));
            }
            out.push(Token {
                tok: Tok::Ident {
                    text: s,
                    quoted: true,
                },
                line: tl,
                col: tc,
            });
            continue;
        }
        let negative = c == '-' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit());
        if c.is_ascii_digit() || negative {
            let start = i;
            advance(1, &mut i, &mut line, &mut col);
            let mut dot = false;
            while let Some(&d) = chars.get(i) {
                if d.is_ascii_digit()
                    || (d == '.' && !dot && chars.get(i + 1).is_some_and(|x| x.is_ascii_digit()))
                {
                    dot |= d == '.';
                    advance(1, &mut i, &mut line, &mut col);
                } else {
                    break;
                }
            }
            out.push(Token {
                tok: Tok::Number(chars[start..i].iter().collect()),
                line: tl,
                col: tc,
            });
            continue;
        }
        if c.is_alphabetic() || c == '_' {
            let start = i;
            while chars
                .get(i)
                .is_some_and(|d| d.is_alphanumeric() || *d == '_' || *d == '.')
            {
                advance(1, &mut i, &mut line, &mut col);
            }
            out.push(Token {
                tok: Tok::Ident {
                    text: chars[start..i].iter().collect(),
                    quoted: false,
                },
                line: tl,
                col: tc,
            });
            continue;
        }
        return Err(err(tl, tc, format!("unexpected character `{c}`")));
    }
    out.push(Token {
        tok: Tok::Eof,
        line,
        col,
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<Tok> {
        tokenize(s).unwrap().into_iter().map(|t| t.tok).collect()
    }

    #[test]
    fn lexes_strings_numbers_and_comparators() {
        assert_eq!(
            toks("a >= -1.5, 'it\\'s' <> `odd name`"),
            vec![
                Tok::Ident {
                    text: "a".into(),
                    quoted: false
                },
                Tok::Cmp(Comparator::Ge),
                Tok::Number("-1.5".into()),
                Tok::Comma,
                Tok::Str("it's".into()),
                Tok::Cmp(Comparator::Ne),
                Tok::Ident {
                    text: "odd name".into(),
                    quoted: true
                },
                Tok::Eof,
            ]
        );
        assert_eq!(
            toks("\u{2018}row\u{2019}"),
            vec![Tok::Str("row".into()), Tok::Eof]
        );
        assert_eq!(toks("\u{2018}row'"), vec![Tok::Str("row".into()), Tok::Eof]);
    }

    #[test]
    fn reports_positions() {
        let e = tokenize("SELECT\n  'abc").unwrap_err();
        assert_eq!(
            e,
            PlanError::Syntax {
                line: 2,
                col: 3,
                message: "unterminated string literal".into()
            }
        );
        let e = tokenize("a # b").unwrap_err();
        assert!(matches!(
            e,
            PlanError::Syntax {
                line: 1,
                col: 3,
                ..
            }
        ));
    }

    #[test]
    fn skips_comments() {
        assert_eq!(
            toks("-- note\nLIMIT 1"),
            vec![
                Tok::Ident {
                    text: "LIMIT".into(),
                    quoted: false
                },
                Tok::Number("1".into()),
                Tok::Eof
            ]
        );
    }
}
