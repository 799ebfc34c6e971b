use crate::prompt::{Candidate, Payload, PromptTask};
use crate::relation::{
    column_elements, filter_by_mask, project_indices, row_elements, Database, Element, Granularity,
    Relation, Source,
};

use super::{resolve_variant, Engine, LroKind, OperatorError, Requirement, Variant};

/// Output of a select: a relation for row/column granularity, a
/// sub-database for table granularity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Selected {
    Relation(Relation),
    Database(Database),
}

impl Selected {
    pub fn into_relation(self) -> Option<Relation> {
        match self {
            Self::Relation(r) => Some(r),
            Self::Database(_) => None,
        }
    }

    pub fn into_database(self) -> Option<Database> {
        match self {
            Self::Database(d) => Some(d),
            Self::Relation(_) => None,
        }
    }
}

impl Engine {
    pub async fn lro_select(
        &self,
        source: Source<'_>,
        g: Granularity,
        l: &Requirement,
        variant: Option<Variant>,
    ) -> Result<Selected, OperatorError> {
        let variant = resolve_variant(LroKind::Select, g, variant)?;
        let elements: Vec<Element<'_>> = match (source, g) {
            (Source::Relation(r), Granularity::Row) => row_elements(r),
            (Source::Relation(r), Granularity::Column) => column_elements(r),
            _ => crate::relation::extract_elements(source, g)?,
        };
        let candidates: Vec<Candidate<'_>> = elements
            .into_iter()
            .enumerate()
            .map(|(i, e)| Candidate::new(i, e))
            .collect();
        let keep = self.select_mask(g, &candidates, l, variant).await?;
        let kept: Vec<usize> = keep
            .iter()
            .enumerate()
            .filter(|(_, &k)| k)
            .map(|(i, _)| i)
            .collect();
        Ok(match source {
            Source::Relation(r) if g == Granularity::Row => {
                Selected::Relation(filter_by_mask(r, &keep)?)
            }
            Source::Relation(r) => Selected::Relation(project_indices(r, &kept)),
            Source::Database(db) => Selected::Database(db.subset(&kept)),
        })
    }

    /// Per-candidate verdicts.
    pub(crate) async fn select_mask(
        &self,
        g: Granularity,
        candidates: &[Candidate<'_>],
        l: &Requirement,
        variant: Variant,
    ) -> Result<Vec<bool>, OperatorError> {
        let n = candidates.len();
        let mut keep = vec![false; n];
        if n == 0 {
            return Ok(keep);
        }
        if variant == Variant::One {
            let asks = candidates
                .iter()
                .map(|c| self.build(variant, &PromptTask::SelectOne { g, candidate: c }, l))
                .collect::<Result<Vec<_>, _>>()?;
            for (k, p) in keep.iter_mut().zip(self.ask(asks).await?) {
                if let Payload::Verdict(b) = p {
                    *k = b;
                }
            }
            return Ok(keep);
        }
        let chunks = self.plan_chunks(n, variant, |r, v| {
            self.build(
                v,
                &PromptTask::SelectMany {
                    g,
                    candidates: &candidates[r],
                },
                l,
            )
        })?;
        let ranges: Vec<_> = chunks.iter().map(|(r, _, _)| r.clone()).collect();
        let answers = self
            .ask(chunks.into_iter().map(|(_, req, s)| (req, s)).collect())
            .await?;
        for (r, p) in ranges.into_iter().zip(answers) {
            if let Payload::IndexList(ix) = p {
                for i in ix {
                    keep[r.start + i] = true;
                }
            }
        }
        Ok(keep)
    }
}
