use crate::prompt::{Candidate, MissingCell, Payload, PromptTask};
use crate::relation::{append_column, row_elements, Cell, Granularity, Relation, RelationError};

use super::{resolve_variant, Engine, LroKind, OperatorError, Requirement, Variant};

/// What an impute fills in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImputeTarget<'a> {
    /// Every null cell.
    Cells,
    /// A new column with this name.
    Column(&'a str),
    /// This many new rows.
    Rows(usize),
}

impl ImputeTarget<'_> {
    pub fn granularity(&self) -> Granularity {
        match self {
            Self::Cells => Granularity::Cell,
            Self::Column(_) => Granularity::Column,
            Self::Rows(_) => Granularity::Row,
        }
    }
}

fn cells_of(p: Payload) -> Vec<String> {
    match p {
        Payload::Cells(c) => c,
        other => unreachable!("cells shape, got {other:?}"),
    }
}

impl Engine {
    pub async fn lro_impute(
        &self,
        r: &Relation,
        target: ImputeTarget<'_>,
        l: &Requirement,
        variant: Option<Variant>,
    ) -> Result<Relation, OperatorError> {
        let variant = resolve_variant(LroKind::Impute, target.granularity(), variant)?;
        match target {
            ImputeTarget::Cells => self.impute_cells(r, l, variant).await,
            ImputeTarget::Column(name) => self.impute_column(r, name, l, variant).await,
            ImputeTarget::Rows(count) => self.impute_rows(r, count, l, variant).await,
        }
    }

    async fn impute_cells(
        &self,
        r: &Relation,
        l: &Requirement,
        variant: Variant,
    ) -> Result<Relation, OperatorError> {
        let rows = row_elements(r);
        let missing: Vec<MissingCell<'_>> = r
            .rows()
            .iter()
            .enumerate()
            .flat_map(|(i, row)| {
                row.iter()
                    .enumerate()
                    .filter(|(_, c)| c.is_none())
                    .map(move |(j, _)| (i, j))
            })
            .map(|(row, col)| MissingCell {
                row,
                col,
                column: &r.columns()[col],
                row_element: rows[row].clone(),
            })
            .collect();
        if missing.is_empty() {
            return Err(OperatorError::Precondition(format!(
                "relation `{}` has no null cells",
                r.name()
            )));
        }
        let values: Vec<String> = if variant == Variant::One {
            let asks = missing
                .iter()
                .map(|cell| self.build(variant, &PromptTask::ImputeCell { cell }, l))
                .collect::<Result<Vec<_>, _>>()?;
            self.ask(asks)
                .await?
                .into_iter()
                .flat_map(cells_of)
                .collect()
        } else {
            let chunks = self.plan_chunks(missing.len(), variant, |rg, v| {
                self.build(
                    v,
                    &PromptTask::ImputeCells {
                        cells: &missing[rg],
                    },
                    l,
                )
            })?;
            let asks = chunks.into_iter().map(|(_, req, s)| (req, s)).collect();
            self.ask(asks)
                .await?
                .into_iter()
                .flat_map(cells_of)
                .collect()
        };
        let mut out: Vec<Vec<Cell>> = r.rows().to_vec();
        for (m, v) in missing.iter().zip(values) {
            out[m.row][m.col] = Some(v);
        }
        Ok(Relation::new(r.name(), r.columns().to_vec(), out)?)
    }

    async fn impute_column(
        &self,
        r: &Relation,
        name: &str,
        l: &Requirement,
        variant: Variant,
    ) -> Result<Relation, OperatorError> {
        if name.trim().is_empty() {
            return Err(OperatorError::Precondition(
                "new column needs a name".into(),
            ));
        }
        if r.columns().iter().any(|c| c == name) {
            return Err(RelationError::DuplicateColumn(name.to_string()).into());
        }
        let rows: Vec<Candidate<'_>> = row_elements(r)
            .into_iter()
            .enumerate()
            .map(|(i, e)| Candidate::new(i, e))
            .collect();
        let values: Vec<String> = if rows.is_empty() {
            Vec::new()
        } else if variant == Variant::One {
            let asks = rows
                .iter()
                .map(|row| {
                    self.build(
                        variant,
                        &PromptTask::ImputeColumnOne { column: name, row },
                        l,
                    )
                })
                .collect::<Result<Vec<_>, _>>()?;
            self.ask(asks)
                .await?
                .into_iter()
                .flat_map(cells_of)
                .collect()
        } else {
            let chunks = self.plan_chunks(rows.len(), variant, |rg, v| {
                self.build(
                    v,
                    &PromptTask::ImputeColumnMany {
                        column: name,
                        rows: &rows[rg],
                    },
                    l,
                )
            })?;
            let asks = chunks.into_iter().map(|(_, req, s)| (req, s)).collect();
            self.ask(asks)
                .await?
                .into_iter()
                .flat_map(cells_of)
                .collect()
        };
        Ok(append_column(
            r,
            name,
            values.into_iter().map(Some).collect(),
        )?)
    }

    /// Rows are generated one at a time; each prompt sees the rows generated
    /// before it.
    async fn impute_rows(
        &self,
        r: &Relation,
        count: usize,
        l: &Requirement,
        variant: Variant,
    ) -> Result<Relation, OperatorError> {
        if r.column_count() == 0 {
            return Err(OperatorError::Precondition(
                "cannot generate rows for an empty schema".into(),
            ));
        }
        let mut rows: Vec<Vec<Cell>> = r.rows().to_vec();
        let mut cur = r.clone();
        for k in 0..count {
            let ask = self.build(
                variant,
                &PromptTask::ImputeRow {
                    relation: &cur,
                    ordinal: r.row_count() + k,
                },
                l,
            )?;
            let row = cells_of(self.ask_one(ask).await?);
            rows.push(row.into_iter().map(Some).collect());
            cur = Relation::new(r.name(), r.columns().to_vec(), rows.clone())?;
        }
        Ok(cur)
    }
}
