use crate::operators::{join_columns, LroKind, Variant};
use crate::relation::{Comparator, Database, Granularity};

use super::ast::{ImputeSpec, Plan, PlanNode};
use super::lexer::{tokenize, Tok, Token};
use super::PlanError;

/// Parses plan text without checking names against a database.
pub fn parse_plan(text: &str) -> Result<Plan, PlanError> {
    Parser::new(text, None)?.plan()
}

/// Parses plan text and checks every relation and column it names.
pub fn parse_plan_checked(text: &str, db: &Database) -> Result<Plan, PlanError> {
    Parser::new(text, Some(db))?.plan()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    /// Left join key, checked against the FROM relation.
    LeftKey,
    /// Right join key, checked against the joined relation.
    RightKey,
    Where,
    GroupBy,
    Output,
}

struct ColRef {
    stage: Stage,
    name: String,
    line: usize,
    col: usize,
}

struct Parser<'a> {
    toks: Vec<Token>,
    pos: usize,
    db: Option<&'a Database>,
    refs: Vec<ColRef>,
}

enum Item {
    Star,
    Column(String),
    Impute(ImputeSpec, String, Option<Variant>),
}

enum Pred {
    Classical(String, Comparator, String),
    Lro(String, Option<Variant>),
}

impl<'a> Parser<'a> {
    fn new(text: &str, db: Option<&'a Database>) -> Result<Self, PlanError> {
        Ok(Self {
            toks: tokenize(text)?,
            pos: 0,
            db,
            refs: Vec::new(),
        })
    }

    fn peek(&self) -> &Token {
        &self.toks[self.pos]
    }

    fn bump(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn err_at(&self, t: &Token, message: impl Into<String>) -> PlanError {
        PlanError::Syntax {
            line: t.line,
            col: t.col,
            message: message.into(),
        }
    }

    fn describe(t: &Tok) -> String {
        match t {
            Tok::Ident { text, .. } => format!("`{text}`"),
            Tok::Str(s) => format!("string '{s}'"),
            Tok::Number(n) => format!("number {n}"),
            Tok::Cmp(c) => format!("`{}`", c.as_str()),
            Tok::Comma => "`,`".into(),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::Star => "`*`".into(),
            Tok::Semi => "`;`".into(),
            Tok::Eof => "end of input".into(),
        }
    }

    fn unexpected(&self, wanted: &str) -> PlanError {
        let t = self.peek();
        self.err_at(
            t,
            format!("expected {wanted}, found {}", Self::describe(&t.tok)),
        )
    }

    fn is_kw(&self, kw: &str) -> bool {
        matches!(&self.peek().tok, Tok::Ident { text, quoted: false } if text.eq_ignore_ascii_case(kw))
    }

    fn eat_kw(&mut self, kw: &str) -> bool {
        let hit = self.is_kw(kw);
        if hit {
            self.bump();
        }
        hit
    }

    fn expect_kw(&mut self, kw: &str) -> Result<(), PlanError> {
        if self.eat_kw(kw) {
            Ok(())
        } else {
            Err(self.unexpected(kw))
        }
    }

    fn expect(&mut self, tok: Tok) -> Result<(), PlanError> {
        if self.peek().tok == tok {
            self.bump();
            Ok(())
        } else {
            Err(self.unexpected(&Self::describe(&tok)))
        }
    }

    fn eat(&mut self, tok: Tok) -> bool {
        let hit = self.peek().tok == tok;
        if hit {
            self.bump();
        }
        hit
    }

    fn string(&mut self, what: &str) -> Result<String, PlanError> {
        match &self.peek().tok {
            Tok::Str(s) => {
                let s = s.clone();
                self.bump();
                Ok(s)
            }
            _ => Err(self.unexpected(what)),
        }
    }

    fn requirement(&mut self) -> Result<String, PlanError> {
        let t = self.peek().clone();
        let s = self.string("a requirement string")?;
        if s.trim().is_empty() {
            return Err(self.err_at(&t, "requirement text is empty"));
        }
        Ok(s)
    }

    fn number(&mut self, what: &str) -> Result<usize, PlanError> {
        let t = self.peek().clone();
        match &t.tok {
            Tok::Number(n) => {
                let v = n
                    .parse()
                    .map_err(|_| self.err_at(&t, format!("expected {what}, found number {n}")))?;
                self.bump();
                Ok(v)
            }
            _ => Err(self.unexpected(what)),
        }
    }

    /// Identifier that is not a reserved word (unless backtick-quoted).
    fn ident(&mut self, what: &str) -> Result<(String, Token), PlanError> {
        let t = self.peek().clone();
        match &t.tok {
            Tok::Ident { text, quoted } if *quoted || super::ast::is_plain_ident(text) => {
                let s = text.clone();
                self.bump();
                Ok((s, t))
            }
            _ => Err(self.unexpected(what)),
        }
    }

    fn column(&mut self, stage: Stage) -> Result<String, PlanError> {
        let (name, t) = self.ident("a column name")?;
        self.refs.push(ColRef {
            stage,
            name: name.clone(),
            line: t.line,
            col: t.col,
        });
        Ok(name)
    }

    fn relation(&mut self) -> Result<String, PlanError> {
        let (name, t) = self.ident("a relation name")?;
        if let Some(db) = self.db {
            if db.get(&name).is_none() {
                return Err(PlanError::UnknownRelation {
                    name,
                    line: t.line,
                    col: t.col,
                });
            }
        }
        Ok(name)
    }

    fn granularity(
        &mut self,
        kind: LroKind,
        allowed: &[Granularity],
    ) -> Result<(Granularity, Token), PlanError> {
        let t = self.peek().clone();
        let s = self.string("a granularity literal")?;
        let g: Granularity = s.parse().map_err(|_| PlanError::Granularity {
            line: t.line,
            col: t.col,
            message: format!("`{s}` is not a granularity (cell, row, column or table)"),
        })?;
        if !kind.supports(g) {
            return Err(PlanError::Granularity {
                line: t.line,
                col: t.col,
                message: format!(
                    "LLM_{} is not defined at {g} granularity",
                    kind.as_str().to_uppercase()
                ),
            });
        }
        if !allowed.contains(&g) {
            return Err(PlanError::Granularity {
                line: t.line,
                col: t.col,
                message: format!("{g} granularity is not allowed here"),
            });
        }
        Ok((g, t))
    }

    fn using(&mut self, kind: LroKind, g: Granularity) -> Result<Option<Variant>, PlanError> {
        if !self.is_kw("USING") {
            return Ok(None);
        }
        self.bump();
        let t = self.peek().clone();
        let Tok::Ident { text, .. } = &t.tok else {
            return Err(self.unexpected("a variant name"));
        };
        let mut name = text.clone();
        self.bump();
        if name.eq_ignore_ascii_case("BATCH") {
            self.expect(Tok::LParen)?;
            let b = self.number("a batch size")?;
            self.expect(Tok::RParen)?;
            name = format!("batch({b})");
        }
        let v: Variant = name.parse().map_err(|e: String| self.err_at(&t, e))?;
        if !v.valid_for(kind, g) {
            return Err(self.err_at(
                &t,
                format!("{v} is not an implementation of {kind} at {g} granularity"),
            ));
        }
        Ok(Some(v))
    }

    fn lro_name(&self) -> Option<LroKind> {
        match &self.peek().tok {
            Tok::Ident {
                text,
                quoted: false,
            } => {
                let up = text.to_ascii_uppercase();
                up.strip_prefix("LLM_").and_then(|k| k.parse().ok())
            }
            _ => None,
        }
    }

    fn plan(mut self) -> Result<Plan, PlanError> {
        let root = if self.is_kw("SELECT") {
            self.query()?
        } else if self.lro_name().is_some() {
            self.call()?
        } else {
            return Err(self.unexpected("SELECT or an LLM_ call"));
        };
        self.eat(Tok::Semi);
        if self.peek().tok != Tok::Eof {
            return Err(self.unexpected("end of input"));
        }
        self.check_columns(&root)?;
        Plan::new(root)
    }

    /// Standalone call whose first argument names the relation.
    fn call(&mut self) -> Result<PlanNode, PlanError> {
        let kind = self.lro_name().expect("checked by caller");
        let name_tok = self.bump();
        self.expect(Tok::LParen)?;
        if let Tok::Str(_) = self.peek().tok {
            let all = Granularity::ALL;
            self.granularity(kind, &all)?;
            return Err(self.err_at(
                &name_tok,
                "an LLM_ call without a relation argument must sit inside a SELECT ... FROM query",
            ));
        }
        let database = self.eat_kw("DATABASE");
        let input = if database {
            PlanNode::ScanDatabase
        } else {
            PlanNode::Scan(self.relation()?)
        };
        self.expect(Tok::Comma)?;
        let input = Box::new(input);
        use Granularity::*;
        let node = match kind {
            LroKind::Select | LroKind::Cluster => {
                let allowed: &[Granularity] = if database { &[Table] } else { &[Row, Column] };
                let (g, _) = self.granularity(kind, allowed)?;
                self.expect(Tok::Comma)?;
                let requirement = self.requirement()?;
                let variant = self.using(kind, g)?;
                if kind == LroKind::Select {
                    PlanNode::LroSelect {
                        input,
                        g,
                        requirement,
                        variant,
                    }
                } else {
                    PlanNode::LroCluster {
                        input,
                        g,
                        requirement,
                        variant,
                    }
                }
            }
            LroKind::Order => {
                if database {
                    return Err(self.err_at(&name_tok, "LLM_ORDER needs a relation"));
                }
                if let Tok::Str(_) = self.peek().tok {
                    if self
                        .toks
                        .get(self.pos + 1)
                        .is_some_and(|t| t.tok == Tok::Comma)
                    {
                        self.granularity(kind, &[Row])?;
                        self.expect(Tok::Comma)?;
                    }
                }
                let requirement = self.requirement()?;
                let variant = self.using(kind, Row)?;
                PlanNode::LroOrder {
                    input,
                    requirement,
                    variant,
                }
            }
            LroKind::Impute => {
                if database {
                    return Err(self.err_at(&name_tok, "LLM_IMPUTE needs a relation"));
                }
                let (g, _) = self.granularity(kind, &[Cell, Row, Column])?;
                self.expect(Tok::Comma)?;
                let target = match g {
                    Cell => ImputeSpec::Cells,
                    Column => {
                        let c = self.string("the new column name")?;
                        self.expect(Tok::Comma)?;
                        ImputeSpec::Column(c)
                    }
                    _ => {
                        let n = self.number("a row count")?;
                        self.expect(Tok::Comma)?;
                        ImputeSpec::Rows(n)
                    }
                };
                let requirement = self.requirement()?;
                let variant = self.using(kind, g)?;
                PlanNode::LroImpute {
                    input,
                    target,
                    requirement,
                    variant,
                }
            }
            LroKind::Match => {
                if database {
                    return Err(self.err_at(&name_tok, "LLM_MATCH needs two relations"));
                }
                let other = self.relation()?;
                self.expect(Tok::Comma)?;
                let (g, _) = self.granularity(kind, &[Cell, Row, Column])?;
                self.expect(Tok::Comma)?;
                let keys = if g == Cell {
                    let a = self.column(Stage::LeftKey)?;
                    self.expect(Tok::Comma)?;
                    let b = self.column(Stage::RightKey)?;
                    self.expect(Tok::Comma)?;
                    Some((a, b))
                } else {
                    None
                };
                let requirement = self.requirement()?;
                let variant = self.using(kind, g)?;
                PlanNode::LroMatchJoin {
                    input,
                    other,
                    g,
                    keys,
                    requirement,
                    variant,
                }
            }
        };
        self.expect(Tok::RParen)?;
        Ok(node)
    }

    /// Embedded call inside a query: `LLM_X('gran', ..., 'l' [USING v])`.
    fn embedded_head(&mut self, kind: LroKind) -> Result<Token, PlanError> {
        if self.lro_name() != Some(kind) {
            return Err(self.unexpected(&format!("LLM_{}", kind.as_str().to_uppercase())));
        }
        let t = self.bump();
        self.expect(Tok::LParen)?;
        Ok(t)
    }

    fn select_item(&mut self) -> Result<Item, PlanError> {
        if self.eat(Tok::Star) {
            return Ok(Item::Star);
        }
        match self.lro_name() {
            Some(LroKind::Impute) => {
                self.embedded_head(LroKind::Impute)?;
                let (g, _) =
                    self.granularity(LroKind::Impute, &[Granularity::Cell, Granularity::Column])?;
                self.expect(Tok::Comma)?;
                let target = if g == Granularity::Column {
                    let c = self.string("the new column name")?;
                    self.expect(Tok::Comma)?;
                    ImputeSpec::Column(c)
                } else {
                    ImputeSpec::Cells
                };
                let requirement = self.requirement()?;
                let variant = self.using(LroKind::Impute, g)?;
                self.expect(Tok::RParen)?;
                Ok(Item::Impute(target, requirement, variant))
            }
            Some(_) => {
                Err(self.err_at(self.peek(), "only LLM_IMPUTE may appear in the select list"))
            }
            None => Ok(Item::Column(self.column(Stage::Output)?)),
        }
    }

    fn predicate(&mut self) -> Result<Pred, PlanError> {
        match self.lro_name() {
            Some(LroKind::Select) => {
                self.embedded_head(LroKind::Select)?;
                self.granularity(LroKind::Select, &[Granularity::Row])?;
                self.expect(Tok::Comma)?;
                let l = self.requirement()?;
                let v = self.using(LroKind::Select, Granularity::Row)?;
                self.expect(Tok::RParen)?;
                Ok(Pred::Lro(l, v))
            }
            Some(_) => Err(self.err_at(self.peek(), "only LLM_SELECT may appear in WHERE")),
            None => {
                let c = self.column(Stage::Where)?;
                let op = match self.peek().tok {
                    Tok::Cmp(op) => op,
                    _ => return Err(self.unexpected("a comparison operator")),
                };
                self.bump();
                let lit = match &self.peek().tok {
                    Tok::Str(s) | Tok::Number(s) => s.clone(),
                    _ => return Err(self.unexpected("a literal")),
                };
                self.bump();
                Ok(Pred::Classical(c, op, lit))
            }
        }
    }

    fn query(&mut self) -> Result<PlanNode, PlanError> {
        self.expect_kw("SELECT")?;
        let first = self.peek().clone();
        let mut items = vec![self.select_item()?];
        while self.eat(Tok::Comma) {
            items.push(self.select_item()?);
        }
        self.expect_kw("FROM")?;
        let from = self.relation()?;
        let mut node = PlanNode::Scan(from);

        if self.eat_kw("JOIN") {
            let other = self.relation()?;
            self.expect_kw("ON")?;
            self.embedded_head(LroKind::Match)?;
            let (g, _) =
                self.granularity(LroKind::Match, &[Granularity::Cell, Granularity::Row])?;
            self.expect(Tok::Comma)?;
            let keys = if g == Granularity::Cell {
                let a = self.column(Stage::LeftKey)?;
                self.expect(Tok::Comma)?;
                let b = self.column(Stage::RightKey)?;
                self.expect(Tok::Comma)?;
                Some((a, b))
            } else {
                None
            };
            let requirement = self.requirement()?;
            let variant = self.using(LroKind::Match, g)?;
            self.expect(Tok::RParen)?;
            node = PlanNode::LroMatchJoin {
                input: Box::new(node),
                other,
                g,
                keys,
                requirement,
                variant,
            };
        }

        if self.eat_kw("WHERE") {
            let mut preds = vec![self.predicate()?];
            while self.eat_kw("AND") {
                preds.push(self.predicate()?);
            }
            let (classical, lro): (Vec<_>, Vec<_>) = preds
                .into_iter()
                .partition(|p| matches!(p, Pred::Classical(..)));
            for p in classical.into_iter().chain(lro) {
                node = match p {
                    Pred::Classical(column, op, literal) => PlanNode::Filter {
                        input: Box::new(node),
                        column,
                        op,
                        literal,
                    },
                    Pred::Lro(requirement, variant) => PlanNode::LroSelect {
                        input: Box::new(node),
                        g: Granularity::Row,
                        requirement,
                        variant,
                    },
                };
            }
        }

        let mut star = false;
        let mut columns = Vec::new();
        let mut impute = None;
        for (i, item) in items.into_iter().enumerate() {
            match item {
                Item::Star if i == 0 => star = true,
                Item::Star => {
                    return Err(self.err_at(&first, "`*` must come first in the select list"))
                }
                Item::Column(c) if star => {
                    return Err(
                        self.err_at(&first, format!("`*` cannot be combined with column `{c}`"))
                    )
                }
                Item::Column(c) => columns.push(c),
                Item::Impute(target, requirement, variant) => {
                    if impute.is_some() {
                        return Err(self.err_at(&first, "at most one LLM_IMPUTE per query"));
                    }
                    if let (false, ImputeSpec::Column(c)) = (star, &target) {
                        columns.push(c.clone());
                    }
                    impute = Some((target, requirement, variant));
                }
            }
        }
        if !star && columns.is_empty() {
            return Err(self.err_at(&first, "select list needs `*` or at least one column"));
        }
        if let Some((target, requirement, variant)) = impute {
            node = PlanNode::LroImpute {
                input: Box::new(node),
                target,
                requirement,
                variant,
            };
        }

        if self.eat_kw("GROUP") {
            self.expect_kw("BY")?;
            if self.lro_name().is_some() {
                self.embedded_head(LroKind::Cluster)?;
                self.granularity(LroKind::Cluster, &[Granularity::Row])?;
                self.expect(Tok::Comma)?;
                let requirement = self.requirement()?;
                let variant = self.using(LroKind::Cluster, Granularity::Row)?;
                self.expect(Tok::RParen)?;
                node = PlanNode::LroCluster {
                    input: Box::new(node),
                    g: Granularity::Row,
                    requirement,
                    variant,
                };
            } else {
                let mut cols = vec![self.column(Stage::GroupBy)?];
                while self.eat(Tok::Comma) {
                    cols.push(self.column(Stage::GroupBy)?);
                }
                node = PlanNode::GroupBy {
                    input: Box::new(node),
                    columns: cols,
                };
            }
        }

        if self.eat_kw("ORDER") {
            self.expect_kw("BY")?;
            if self.lro_name().is_some() {
                self.embedded_head(LroKind::Order)?;
                if let Tok::Str(_) = self.peek().tok {
                    if self
                        .toks
                        .get(self.pos + 1)
                        .is_some_and(|t| t.tok == Tok::Comma)
                    {
                        self.granularity(LroKind::Order, &[Granularity::Row])?;
                        self.expect(Tok::Comma)?;
                    }
                }
                let requirement = self.requirement()?;
                let variant = self.using(LroKind::Order, Granularity::Row)?;
                self.expect(Tok::RParen)?;
                node = PlanNode::LroOrder {
                    input: Box::new(node),
                    requirement,
                    variant,
                };
            } else {
                let column = self.column(Stage::Output)?;
                let descending = if self.eat_kw("DESC") {
                    true
                } else {
                    self.eat_kw("ASC");
                    false
                };
                node = PlanNode::OrderBy {
                    input: Box::new(node),
                    column,
                    descending,
                };
            }
        }

        if !star {
            node = PlanNode::Project {
                input: Box::new(node),
                columns,
            };
        }

        if self.eat_kw("LIMIT") {
            let n = self.number("a row limit")?;
            node = PlanNode::Limit {
                input: Box::new(node),
                n,
            };
        }
        Ok(node)
    }

    fn check_columns(&self, root: &PlanNode) -> Result<(), PlanError> {
        let Some(db) = self.db else { return Ok(()) };
        let chain = root.chain();
        let mut base: Vec<String> = Vec::new();
        let mut right: Vec<String> = Vec::new();
        let mut after_join = Vec::new();
        let mut after_group = Vec::new();
        let mut after_impute = Vec::new();
        for node in chain.iter().rev() {
            match node {
                PlanNode::Scan(r) => {
                    base = db.get(r).map(|r| r.columns().to_vec()).unwrap_or_default();
                    after_join.clone_from(&base);
                }
                PlanNode::LroMatchJoin { other, .. } => {
                    let o = db.get(other).expect("relation checked");
                    right = o.columns().to_vec();
                    after_join = join_columns(&base, o.name(), o.columns());
                }
                PlanNode::LroImpute {
                    target: ImputeSpec::Column(c),
                    ..
                } => {
                    after_impute = after_join.clone();
                    after_impute.push(c.clone());
                }
                PlanNode::LroCluster {
                    g: Granularity::Row,
                    ..
                } => {
                    after_group = if after_impute.is_empty() {
                        after_join.clone()
                    } else {
                        after_impute.clone()
                    };
                    after_group.push("cluster".into());
                }
                _ => {}
            }
        }
        if after_impute.is_empty() {
            after_impute.clone_from(&after_join);
        }
        if after_group.is_empty() {
            after_group.clone_from(&after_impute);
        }
        for r in &self.refs {
            let schema = match r.stage {
                Stage::LeftKey => &base,
                Stage::RightKey => &right,
                Stage::Where => &after_join,
                Stage::GroupBy => &after_impute,
                Stage::Output => &after_group,
            };
            if !schema.contains(&r.name) {
                return Err(PlanError::UnknownColumn {
                    name: r.name.clone(),
                    line: r.line,
                    col: r.col,
                });
            }
        }
        Ok(())
    }
}
