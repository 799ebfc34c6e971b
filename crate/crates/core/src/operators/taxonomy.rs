//! Operator kinds, implementation variants, and the pairings between them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::relation::Granularity;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LroKind {
    Select,
    Match,
    Impute,
    Cluster,
    Order,
}

impl LroKind {
    pub const ALL: [LroKind; 5] = [
        Self::Select,
        Self::Match,
        Self::Impute,
        Self::Cluster,
        Self::Order,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Select => "select",
            Self::Match => "match",
            Self::Impute => "impute",
            Self::Cluster => "cluster",
            Self::Order => "order",
        }
    }

    pub fn supports(self, g: Granularity) -> bool {
        use Granularity::*;
        matches!(
            (self, g),
            (Self::Select, Row | Column | Table)
                | (Self::Match, Cell | Row | Column)
                | (Self::Impute, Cell | Row | Column)
                | (Self::Cluster, Row | Column | Table)
                | (Self::Order, Row)
        )
    }
}

impl fmt::Display for LroKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LroKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown operator `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    All,
    One,
    Semi,
    Pair,
    Sort,
    Score,
    Batch(usize),
}

impl Variant {
    /// Whether `self` is an implementation of `kind` at granularity `g`.
    pub fn valid_for(self, kind: LroKind, g: Granularity) -> bool {
        if !kind.supports(g) {
            return false;
        }
        match (kind, self) {
            (_, Self::Batch(0)) => false,
            (LroKind::Impute, _) if g == Granularity::Row => self == Self::One,
            (LroKind::Select | LroKind::Impute, Self::All | Self::One | Self::Batch(_)) => true,
            (LroKind::Match, Self::All | Self::One | Self::Semi) => true,
            (LroKind::Cluster, Self::All | Self::One) => true,
            (LroKind::Order, Self::All | Self::Pair | Self::Sort | Self::Score) => true,
            _ => false,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::All => f.write_str("ALL"),
            Self::One => f.write_str("ONE"),
            Self::Semi => f.write_str("SEMI"),
            Self::Pair => f.write_str("PAIR"),
            Self::Sort => f.write_str("SORT"),
            Self::Score => f.write_str("SCORE"),
            Self::Batch(b) => write!(f, "BATCH({b})"),
        }
    }
}

impl FromStr for Variant {
    type Err = String;

    /// Accepts `all`, `one`, …, `batch(50)` or `batch:50`, with or without an
    /// `LLM-` prefix, case-insensitively.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim().to_ascii_lowercase();
        let t = t.strip_prefix("llm-").unwrap_or(&t);
        let v = match t {
            "all" => Self::All,
            "one" => Self::One,
            "semi" => Self::Semi,
            "pair" => Self::Pair,
            "sort" => Self::Sort,
            "score" => Self::Score,
            other => {
                let n = other
                    .strip_prefix("batch(")
                    .and_then(|r| r.strip_suffix(')'))
                    .or_else(|| other.strip_prefix("batch:"))
                    .ok_or_else(|| format!("unknown variant `{s}`"))?;
                let b: usize = n
                    .trim()
                    .parse()
                    .map_err(|_| format!("bad batch size in `{s}`"))?;
                if b == 0 {
                    return Err("batch size must be at least 1".into());
                }
                Self::Batch(b)
            }
        };
        Ok(v)
    }
}

/// The recommended implementation for each defined (operator, granularity)
/// cell; `None` for undefined cells.
pub fn best_practice_variant(kind: LroKind, g: Granularity) -> Option<Variant> {
    use Granularity::*;
    use LroKind::*;
    let v = match (kind, g) {
        (Select, Row) => Variant::One,
        (Select, Column) | (Select, Table) => Variant::All,
        (Match, Cell) | (Match, Column) => Variant::All,
        (Match, Row) => Variant::Semi,
        (Impute, Cell) => Variant::All,
        (Impute, Row) | (Impute, Column) => Variant::One,
        (Cluster, Row) | (Cluster, Column) | (Cluster, Table) => Variant::All,
        (Order, Row) => Variant::All,
        _ => return None,
    };
    Some(v)
}
