use serde::Serialize;

use crate::gateway::UsageLedger;
use crate::operators::{
    materialize_join, materialize_row_join, Engine, ImputeTarget, Note, OperatorError, Requirement,
};
use crate::relation::{
    append_column, concat, filter_compare, group_rows, order_by_column, project, take, Database,
    Granularity, GroupKey, Relation, Source,
};

use super::ast::{ImputeSpec, Plan, PlanNode};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceEntry {
    pub node: String,
    /// Rows (or tables, for a database) entering the node.
    pub input_rows: usize,
    pub output_rows: usize,
    pub calls: usize,
}

#[derive(Debug, Clone)]
pub struct Execution {
    pub output: Relation,
    pub ledger: UsageLedger,
    pub trace: Vec<TraceEntry>,
    pub notes: Vec<Note>,
}

#[derive(Debug, Clone, thiserror::Error)]
#[error("{node}: {source}")]
pub struct ExecError {
    pub node: String,
    pub source: OperatorError,
    /// Usage spent before the failure.
    pub ledger: UsageLedger,
}

impl ExecError {
    pub fn is_timeout(&self) -> bool {
        self.source.is_timeout()
    }
}

enum Value {
    Rel(Relation),
    Db(Database),
}

impl Value {
    fn size(&self) -> usize {
        match self {
            Self::Rel(r) => r.row_count(),
            Self::Db(d) => d.len(),
        }
    }

    fn rel(&self) -> Result<&Relation, OperatorError> {
        match self {
            Self::Rel(r) => Ok(r),
            Self::Db(_) => Err(OperatorError::Precondition(
                "node needs a relation, got a database".into(),
            )),
        }
    }

    fn into_relation(self) -> Relation {
        match self {
            Self::Rel(r) => r,
            Self::Db(d) => {
                let rows = d
                    .relations()
                    .iter()
                    .map(|r| vec![Some(r.name().to_string())])
                    .collect();
                Relation::new("tables", vec!["table".into()], rows).expect("one-column relation")
            }
        }
    }
}

/// Evaluates the plan leaf to root. Each execution gets its own ledger and
/// per-query deadline.
pub async fn execute(plan: &Plan, db: &Database, engine: &Engine) -> Result<Execution, ExecError> {
    let engine = engine.begin_query();
    let mut chain = plan.root().chain();
    chain.reverse();
    let mut value: Option<Value> = None;
    let mut trace = Vec::with_capacity(chain.len());
    for node in chain {
        let before = engine.gateway().calls();
        let input_rows = value.as_ref().map_or(0, Value::size);
        let out = step(node, value.take(), db, &engine)
            .await
            .map_err(|source| ExecError {
                node: node.label(),
                source,
                ledger: engine.gateway().ledger(),
            })?;
        trace.push(TraceEntry {
            node: node.label(),
            input_rows,
            output_rows: out.size(),
            calls: engine.gateway().calls() - before,
        });
        log::debug!("{}: {} -> {} rows", node.label(), input_rows, out.size());
        value = Some(out);
    }
    Ok(Execution {
        output: value.expect("chain ends in a scan").into_relation(),
        ledger: engine.gateway().ledger(),
        trace,
        notes: engine.notes(),
    })
}

fn source(v: &Value) -> Source<'_> {
    match v {
        Value::Rel(r) => Source::Relation(r),
        Value::Db(d) => Source::Database(d),
    }
}

fn name_pairs(
    name: &str,
    columns: [&str; 2],
    rows: Vec<[String; 2]>,
) -> Result<Relation, OperatorError> {
    let rows = rows
        .into_iter()
        .map(|r| r.into_iter().map(Some).collect())
        .collect();
    Ok(Relation::new(
        name,
        columns.iter().map(|c| c.to_string()).collect(),
        rows,
    )?)
}

async fn step(
    node: &PlanNode,
    input: Option<Value>,
    db: &Database,
    engine: &Engine,
) -> Result<Value, OperatorError> {
    let req = |l: &str| Requirement::new(l);
    Ok(match node {
        PlanNode::Scan(r) => Value::Rel(db.relation(r)?.clone()),
        PlanNode::ScanDatabase => Value::Db(db.clone()),
        _ => {
            let input = input.expect("non-leaf node has an input");
            match node {
                PlanNode::Project { columns, .. } => {
                    let cols: Vec<&str> = columns.iter().map(String::as_str).collect();
                    Value::Rel(project(input.rel()?, &cols)?)
                }
                PlanNode::Filter {
                    column,
                    op,
                    literal,
                    ..
                } => Value::Rel(filter_compare(input.rel()?, column, *op, literal)?),
                PlanNode::OrderBy {
                    column, descending, ..
                } => Value::Rel(order_by_column(input.rel()?, column, *descending)?),
                PlanNode::Limit { n, .. } => Value::Rel(take(input.rel()?, *n)),
                PlanNode::GroupBy { columns, .. } => {
                    let r = input.rel()?;
                    let groups = group_rows(r, GroupKey::Columns(columns))?;
                    Value::Rel(concat(
                        r.name(),
                        r.columns(),
                        groups.into_iter().map(|(_, g)| g),
                    ))
                }
                PlanNode::LroSelect {
                    g,
                    requirement,
                    variant,
                    ..
                } => {
                    let sel = engine
                        .lro_select(source(&input), *g, &req(requirement)?, *variant)
                        .await?;
                    match sel {
                        crate::operators::Selected::Relation(r) => Value::Rel(r),
                        crate::operators::Selected::Database(d) => Value::Db(d),
                    }
                }
                PlanNode::LroMatchJoin {
                    other,
                    g,
                    keys,
                    requirement,
                    variant,
                    ..
                } => {
                    let left = input.rel()?;
                    let right = db.relation(other)?;
                    let keys_ref = keys.as_ref().map(|(a, b)| (a.as_str(), b.as_str()));
                    let m = engine
                        .lro_match(left, right, *g, keys_ref, &req(requirement)?, *variant)
                        .await?;
                    match g {
                        Granularity::Cell => Value::Rel(materialize_join(
                            left,
                            right,
                            keys_ref.expect("cell match has keys"),
                            &m,
                        )?),
                        Granularity::Row => Value::Rel(materialize_row_join(left, right, &m)?),
                        _ => {
                            let name = |r: &Relation, i: usize| -> Result<String, OperatorError> {
                                r.columns().get(i).cloned().ok_or(OperatorError::StaleId {
                                    id: i,
                                    len: r.column_count(),
                                })
                            };
                            let rows = m
                                .pairs
                                .iter()
                                .map(|&(a, b)| Ok([name(left, a)?, name(right, b)?]))
                                .collect::<Result<Vec<_>, OperatorError>>()?;
                            Value::Rel(name_pairs(
                                left.name(),
                                ["left_column", "right_column"],
                                rows,
                            )?)
                        }
                    }
                }
                PlanNode::LroImpute {
                    target,
                    requirement,
                    variant,
                    ..
                } => {
                    let t = match target {
                        ImputeSpec::Cells => ImputeTarget::Cells,
                        ImputeSpec::Column(c) => ImputeTarget::Column(c),
                        ImputeSpec::Rows(n) => ImputeTarget::Rows(*n),
                    };
                    Value::Rel(
                        engine
                            .lro_impute(input.rel()?, t, &req(requirement)?, *variant)
                            .await?,
                    )
                }
                PlanNode::LroCluster {
                    g,
                    requirement,
                    variant,
                    ..
                } => {
                    let c = engine
                        .lro_cluster(source(&input), *g, &req(requirement)?, *variant)
                        .await?;
                    let labels = c.labels();
                    match (g, &input) {
                        (Granularity::Row, Value::Rel(r)) => {
                            let tagged = append_column(
                                r,
                                "cluster",
                                labels.iter().cloned().map(Some).collect(),
                            )?;
                            let groups = group_rows(&tagged, GroupKey::Labels(&labels))?;
                            Value::Rel(concat(
                                tagged.name(),
                                tagged.columns(),
                                groups.into_iter().map(|(_, g)| g),
                            ))
                        }
                        (Granularity::Column, Value::Rel(r)) => {
                            let rows = r
                                .columns()
                                .iter()
                                .zip(labels)
                                .map(|(c, label)| [c.clone(), label])
                                .collect();
                            Value::Rel(name_pairs(r.name(), ["column", "cluster"], rows)?)
                        }
                        (_, Value::Db(d)) => {
                            let rows = d
                                .relations()
                                .iter()
                                .zip(labels)
                                .map(|(r, label)| [r.name().to_string(), label])
                                .collect();
                            Value::Rel(name_pairs("tables", ["table", "cluster"], rows)?)
                        }
                        _ => {
                            return Err(OperatorError::Precondition(format!(
                                "{} cannot read this input",
                                node.label()
                            )))
                        }
                    }
                }
                PlanNode::LroOrder {
                    requirement,
                    variant,
                    ..
                } => Value::Rel(
                    engine
                        .lro_order(input.rel()?, &req(requirement)?, *variant)
                        .await?,
                ),
                PlanNode::Scan(_) | PlanNode::ScanDatabase => unreachable!("handled above"),
            }
        }
    })
}
