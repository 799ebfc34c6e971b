use std::collections::HashSet;

use serde::Serialize;

use crate::prompt::{Candidate, Payload, PromptTask};
use crate::relation::{column_elements, row_elements, Element, Granularity, Relation};

use super::{resolve_variant, Engine, LroKind, OperatorError, Requirement, Variant};

/// Matched (left id, right id) pairs, sorted and free of duplicates.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct MatchResult {
    pub pairs: Vec<(usize, usize)>,
}

impl MatchResult {
    pub fn new(pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut pairs: Vec<_> = pairs.into_iter().collect();
        pairs.sort_unstable();
        pairs.dedup();
        Self { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Distinct non-null values of `column` in first-appearance order, each
/// with the row it first appears in. Cell-wise match ids index this list.
pub fn distinct_key_values<'a>(
    r: &'a Relation,
    column: &str,
) -> Result<Vec<(usize, &'a str)>, OperatorError> {
    let col = r.column_index(column)?;
    let mut seen = HashSet::new();
    Ok(r.column_values(col)
        .into_iter()
        .enumerate()
        .filter_map(|(row, v)| v.map(|v| (row, v)))
        .filter(|(_, v)| seen.insert(*v))
        .collect())
}

fn key_candidates<'a>(r: &'a Relation, column: &str) -> Result<Vec<Candidate<'a>>, OperatorError> {
    let col = r.column_index(column)?;
    let name = r.columns()[col].as_str();
    Ok(distinct_key_values(r, column)?
        .into_iter()
        .enumerate()
        .map(|(id, (row, v))| {
            Candidate::new(
                id,
                Element::Cell {
                    row,
                    col,
                    column: name,
                    value: Some(v),
                },
            )
        })
        .collect())
}

/// Output schema of a join: left columns, then right columns, with a
/// colliding right column renamed to `<right relation>.<column>`.
pub fn join_columns(left: &[String], right_name: &str, right: &[String]) -> Vec<String> {
    let mut cols: Vec<String> = left.to_vec();
    for c in right {
        let mut name = c.clone();
        if cols.contains(&name) {
            name = format!("{right_name}.{c}");
        }
        while cols.contains(&name) {
            name.push('_');
        }
        cols.push(name);
    }
    cols
}

/// Equi-join on the matched key-value pairs of a cell-wise match.
pub fn materialize_join(
    left: &Relation,
    right: &Relation,
    keys: (&str, &str),
    m: &MatchResult,
) -> Result<Relation, OperatorError> {
    let lv = distinct_key_values(left, keys.0)?;
    let rv = distinct_key_values(right, keys.1)?;
    let mut matched = HashSet::new();
    for &(a, b) in &m.pairs {
        let (_, x) = lv.get(a).ok_or(OperatorError::StaleId {
            id: a,
            len: lv.len(),
        })?;
        let (_, y) = rv.get(b).ok_or(OperatorError::StaleId {
            id: b,
            len: rv.len(),
        })?;
        matched.insert((*x, *y));
    }
    let (li, ri) = (left.column_index(keys.0)?, right.column_index(keys.1)?);
    let mut rows = Vec::new();
    for lrow in left.rows() {
        let Some(x) = lrow[li].as_deref() else {
            continue;
        };
        for rrow in right.rows() {
            let Some(y) = rrow[ri].as_deref() else {
                continue;
            };
            if matched.contains(&(x, y)) {
                rows.push(lrow.iter().chain(rrow).cloned().collect());
            }
        }
    }
    Ok(Relation::new(
        left.name(),
        join_columns(left.columns(), right.name(), right.columns()),
        rows,
    )?)
}

/// Join of a row-wise match: ids are row indices.
pub fn materialize_row_join(
    left: &Relation,
    right: &Relation,
    m: &MatchResult,
) -> Result<Relation, OperatorError> {
    let mut rows = Vec::with_capacity(m.len());
    for &(a, b) in &m.pairs {
        let l = left.rows().get(a).ok_or(OperatorError::StaleId {
            id: a,
            len: left.row_count(),
        })?;
        let r = right.rows().get(b).ok_or(OperatorError::StaleId {
            id: b,
            len: right.row_count(),
        })?;
        rows.push(l.iter().chain(r).cloned().collect());
    }
    Ok(Relation::new(
        left.name(),
        join_columns(left.columns(), right.name(), right.columns()),
        rows,
    )?)
}

impl Engine {
    /// `keys` names the two join-key columns and is required at cell
    /// granularity, where candidates are the distinct key values.
    pub async fn lro_match(
        &self,
        left: &Relation,
        right: &Relation,
        g: Granularity,
        keys: Option<(&str, &str)>,
        l: &Requirement,
        variant: Option<Variant>,
    ) -> Result<MatchResult, OperatorError> {
        let variant = resolve_variant(LroKind::Match, g, variant)?;
        let (lc, rc): (Vec<Candidate<'_>>, Vec<Candidate<'_>>) = match g {
            Granularity::Cell => {
                let (k1, k2) = keys.ok_or_else(|| {
                    OperatorError::Precondition("cell-wise match needs two join-key columns".into())
                })?;
                (key_candidates(left, k1)?, key_candidates(right, k2)?)
            }
            Granularity::Row => (numbered(row_elements(left)), numbered(row_elements(right))),
            _ => (
                numbered(column_elements(left)),
                numbered(column_elements(right)),
            ),
        };
        if lc.is_empty() || rc.is_empty() {
            return Ok(MatchResult::default());
        }
        let pairs = match variant {
            Variant::All => {
                let ask = self.build(
                    variant,
                    &PromptTask::MatchAll {
                        g,
                        left: &lc,
                        right: &rc,
                    },
                    l,
                )?;
                match self.ask_one(ask).await? {
                    Payload::PairList(p) => p,
                    _ => unreachable!("pair-list shape"),
                }
            }
            Variant::One => {
                let mut idx = Vec::with_capacity(lc.len() * rc.len());
                let mut asks = Vec::with_capacity(idx.capacity());
                for a in &lc {
                    for b in &rc {
                        idx.push((a.id, b.id));
                        asks.push(self.build(
                            variant,
                            &PromptTask::MatchOne {
                                g,
                                left: a,
                                right: b,
                            },
                            l,
                        )?);
                    }
                }
                idx.into_iter()
                    .zip(self.ask(asks).await?)
                    .filter(|(_, p)| matches!(p, Payload::Verdict(true)))
                    .map(|(ix, _)| ix)
                    .collect()
            }
            _ => {
                let asks = lc
                    .iter()
                    .map(|a| {
                        self.build(
                            variant,
                            &PromptTask::MatchSemi {
                                g,
                                left: a,
                                right: &rc,
                            },
                            l,
                        )
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                let mut pairs = Vec::new();
                for (a, p) in lc.iter().zip(self.ask(asks).await?) {
                    if let Payload::IndexList(ix) = p {
                        pairs.extend(ix.into_iter().map(|b| (a.id, b)));
                    }
                }
                pairs
            }
        };
        Ok(MatchResult::new(pairs))
    }
}

fn numbered(elements: Vec<Element<'_>>) -> Vec<Candidate<'_>> {
    elements
        .into_iter()
        .enumerate()
        .map(|(i, e)| Candidate::new(i, e))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{ChatRequest, MockReply, MockScript};
    use crate::operators::testkit::engine;

    fn companies() -> (Relation, Relation) {
        let a = Relation::from_strs(
            "A",
            &["Company Name", "Revenue"],
            &[&["MSFT", "245"], &["GOOG", "307"], &["MSFT", "211"]],
        )
        .unwrap();
        let b = Relation::from_strs(
            "B",
            &["Enterprise", "Revenue"],
            &[
                &["Microsoft", "x"],
                &["Alphabet", "y"],
                &["Reckitt", "z"],
                &["Microsoft", "w"],
            ],
        )
        .unwrap();
        (a, b)
    }

    fn ticker_rule(req: &ChatRequest) -> Option<MockReply> {
        let ok = |l: &str, r: &str| matches!((l, r), ("MSFT", "Microsoft") | ("GOOG", "Alphabet"));
        let lefts = ["MSFT", "GOOG"];
        let rights = ["Microsoft", "Alphabet", "Reckitt"];
        match req.tag.variant.as_str() {
            "ONE" => {
                let l = lefts
                    .iter()
                    .find(|x| req.user.contains(&format!("Company Name: {x}")))?;
                let r = rights
                    .iter()
                    .find(|x| req.user.contains(&format!("Enterprise: {x}")))?;
                Some(format!("{{\"match\": {}}}", ok(l, r)).into())
            }
            "SEMI" => {
                let l = lefts
                    .iter()
                    .find(|x| req.user.contains(&format!("Company Name: {x}")))?;
                let hits: Vec<usize> = (0..3).filter(|&i| ok(l, rights[i])).collect();
                Some(format!("{{\"matches\": {hits:?}}}").into())
            }
            _ => Some("{\"pairs\": [[0, 0], [1, 1], [0, 0]]}".into()),
        }
    }

    #[tokio::test(start_paused = true)]
    async fn every_variant_agrees_and_counts_calls() {
        let (a, b) = companies();
        let l =
            Requirement::new("the Company Name in Table (a) matches the Enterprise in Table (b)")
                .unwrap();
        for (v, calls) in [(Variant::All, 1), (Variant::One, 6), (Variant::Semi, 2)] {
            let (eng, mock) = engine(MockScript::new().rule(ticker_rule));
            let m = eng
                .lro_match(
                    &a,
                    &b,
                    Granularity::Cell,
                    Some(("Company Name", "Enterprise")),
                    &l,
                    Some(v),
                )
                .await
                .unwrap();
            assert_eq!(m.pairs, [(0, 0), (1, 1)], "{v}");
            assert_eq!(mock.stats().calls, calls, "{v}");
        }
    }

    #[tokio::test(start_paused = true)]
    async fn empty_left_makes_no_calls() {
        let (a, b) = companies();
        let empty = a.empty_like();
        let l = Requirement::new("x").unwrap();
        let (eng, mock) = engine(MockScript::new());
        for v in [Variant::One, Variant::Semi, Variant::All] {
            let m = eng
                .lro_match(&empty, &b, Granularity::Row, None, &l, Some(v))
                .await
                .unwrap();
            assert!(m.is_empty());
        }
        assert_eq!(mock.stats().calls, 0);
    }

    #[test]
    fn join_expands_duplicate_keys() {
        let (a, b) = companies();
        let m = MatchResult::new([(0, 0)]);
        let j = materialize_join(&a, &b, ("Company Name", "Enterprise"), &m).unwrap();
        assert_eq!(
            j.columns(),
            ["Company Name", "Revenue", "Enterprise", "B.Revenue"]
        );
        assert_eq!(j.row_count(), 4);
        assert!(materialize_join(
            &a,
            &b,
            ("Company Name", "Enterprise"),
            &MatchResult::default()
        )
        .unwrap()
        .is_empty());
        assert_eq!(
            materialize_join(
                &a,
                &b,
                ("Company Name", "Enterprise"),
                &MatchResult::new([(5, 0)])
            )
            .unwrap_err(),
            OperatorError::StaleId { id: 5, len: 2 }
        );
    }

    #[test]
    fn row_join_concatenates() {
        let (a, b) = companies();
        let j = materialize_row_join(&a, &b, &MatchResult::new([(1, 1)])).unwrap();
        assert_eq!(
            j.rows()[0].iter().flatten().collect::<Vec<_>>(),
            ["GOOG", "307", "Alphabet", "y"]
        );
    }
}
