//! Prompt construction and completion parsing.
//!
//! Every prompt ends with a demand for one JSON value; [`parse`] takes the
//! last top-level JSON value in a completion, so chain-of-thought preambles
//! never change what gets parsed.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde_json::{json, Value};

use crate::gateway::{estimate_tokens, ChatRequest, RequestTag};
use crate::operators::{LroKind, Variant};
use crate::relation::{Element, Granularity, Relation};

/// Bumped whenever the shipped template wording changes.
pub const TEMPLATE_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("prompt payload is empty")]
    EmptyPayload,
    #[error("prompt needs ~{tokens} tokens, budget is {limit}")]
    ContextOverflow { tokens: usize, limit: usize },
    #[error("template `{template}`: {message}")]
    Template { template: String, message: String },
    #[error("i/o error reading templates: {0}")]
    Io(String),
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("malformed completion: {0}")]
    Malformed(String),
    #[error("index {index} out of bounds for {len} candidates")]
    OutOfBounds { index: usize, len: usize },
    #[error("score {0} outside [0, 100]")]
    ScoreRange(f64),
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PromptOptions {
    /// Ask for step-by-step reasoning before the answer.
    pub cot: bool,
    /// Include sample values for columns and sample tuples for tables.
    pub examples: bool,
    pub example_count: usize,
}

impl Default for PromptOptions {
    fn default() -> Self {
        Self {
            cot: false,
            examples: false,
            example_count: 3,
        }
    }
}

impl PromptOptions {
    pub fn validate(&self) -> Result<(), PromptError> {
        if self.examples && self.example_count == 0 {
            return Err(PromptError::Template {
                template: "options".into(),
                message: "example_count must be at least 1 when examples are enabled".into(),
            });
        }
        Ok(())
    }
}

fn cell_text(v: Option<&str>) -> &str {
    v.unwrap_or("NULL")
}

fn row_text(columns: &[String], cells: &[Option<String>]) -> String {
    columns
        .iter()
        .zip(cells)
        .map(|(c, v)| format!("{c}: {}", cell_text(v.as_deref())))
        .collect::<Vec<_>>()
        .join("; ")
}

pub fn render_element(e: &Element<'_>, opts: &PromptOptions) -> String {
    match e {
        Element::Cell { column, value, .. } => format!("{column}: {}", cell_text(*value)),
        Element::Row { columns, cells, .. } => row_text(columns, cells),
        Element::Column { name, values, .. } => {
            if !opts.examples {
                return name.to_string();
            }
            let samples: Vec<String> = values
                .iter()
                .flatten()
                .take(opts.example_count)
                .map(|v| format!("\"{v}\""))
                .collect();
            format!("{name} (e.g. {})", samples.join(", "))
        }
        Element::Table(r) => {
            let mut s = format!("{}({})", r.name(), r.columns().join(", "));
            if opts.examples {
                for row in r.rows().iter().take(opts.example_count) {
                    s.push_str("\n    ");
                    s.push_str(&row_text(r.columns(), row));
                }
            }
            s
        }
    }
}

fn numbered(items: impl IntoIterator<Item = String>) -> String {
    items
        .into_iter()
        .enumerate()
        .map(|(i, s)| format!("[{i}] {s}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// A missing cell together with the row that gives it context.
#[derive(Debug, Clone)]
pub struct MissingCell<'a> {
    pub row: usize,
    pub col: usize,
    pub column: &'a str,
    pub row_element: Element<'a>,
}

/// An element with its source-order id.
#[derive(Debug, Clone)]
pub struct Candidate<'a> {
    pub id: usize,
    pub element: Element<'a>,
}

impl<'a> Candidate<'a> {
    pub fn new(id: usize, element: Element<'a>) -> Self {
        Self { id, element }
    }
}

/// Prompt payload, one variant per prompt shape.
#[derive(Debug, Clone)]
pub enum PromptTask<'a> {
    SelectMany {
        g: Granularity,
        candidates: &'a [Candidate<'a>],
    },
    SelectOne {
        g: Granularity,
        candidate: &'a Candidate<'a>,
    },
    MatchAll {
        g: Granularity,
        left: &'a [Candidate<'a>],
        right: &'a [Candidate<'a>],
    },
    MatchOne {
        g: Granularity,
        left: &'a Candidate<'a>,
        right: &'a Candidate<'a>,
    },
    MatchSemi {
        g: Granularity,
        left: &'a Candidate<'a>,
        right: &'a [Candidate<'a>],
    },
    ImputeCells {
        cells: &'a [MissingCell<'a>],
    },
    ImputeCell {
        cell: &'a MissingCell<'a>,
    },
    ImputeColumnMany {
        column: &'a str,
        rows: &'a [Candidate<'a>],
    },
    ImputeColumnOne {
        column: &'a str,
        row: &'a Candidate<'a>,
    },
    /// `relation` already contains any rows generated earlier in the run.
    ImputeRow {
        relation: &'a Relation,
        ordinal: usize,
    },
    ClusterAll {
        g: Granularity,
        candidates: &'a [Candidate<'a>],
    },
    ClusterOne {
        g: Granularity,
        clusters: &'a [(String, Vec<String>)],
        candidate: &'a Candidate<'a>,
    },
    OrderAll {
        rows: &'a [Candidate<'a>],
    },
    OrderPair {
        a: &'a Candidate<'a>,
        b: &'a Candidate<'a>,
    },
    OrderScore {
        row: &'a Candidate<'a>,
    },
    Judge {
        a: &'a str,
        b: &'a str,
    },
}

impl PromptTask<'_> {
    pub fn kind(&self) -> Option<LroKind> {
        Some(match self {
            Self::SelectMany { .. } | Self::SelectOne { .. } => LroKind::Select,
            Self::MatchAll { .. } | Self::MatchOne { .. } | Self::MatchSemi { .. } => {
                LroKind::Match
            }
            Self::ImputeCells { .. }
            | Self::ImputeCell { .. }
            | Self::ImputeColumnMany { .. }
            | Self::ImputeColumnOne { .. }
            | Self::ImputeRow { .. } => LroKind::Impute,
            Self::ClusterAll { .. } | Self::ClusterOne { .. } => LroKind::Cluster,
            Self::OrderAll { .. } | Self::OrderPair { .. } | Self::OrderScore { .. } => {
                LroKind::Order
            }
            Self::Judge { .. } => return None,
        })
    }

    fn template(&self) -> &'static str {
        match self {
            Self::SelectMany { .. } => "select_many",
            Self::SelectOne { .. } => "select_one",
            Self::MatchAll { .. } => "match_all",
            Self::MatchOne { .. } => "match_one",
            Self::MatchSemi { .. } => "match_semi",
            Self::ImputeCells { .. } => "impute_cells",
            Self::ImputeCell { .. } => "impute_cell",
            Self::ImputeColumnMany { .. } => "impute_column_many",
            Self::ImputeColumnOne { .. } => "impute_column_one",
            Self::ImputeRow { .. } => "impute_row",
            Self::ClusterAll { .. } => "cluster_all",
            Self::ClusterOne { .. } => "cluster_one",
            Self::OrderAll { .. } => "order_all",
            Self::OrderPair { .. } => "order_pair",
            Self::OrderScore { .. } => "order_score",
            Self::Judge { .. } => "judge",
        }
    }

    /// The JSON shape the completion must end with.
    pub fn shape(&self) -> Shape {
        match self {
            Self::SelectMany { candidates, .. } => Shape::IndexList {
                key: "selected",
                len: candidates.len(),
            },
            Self::SelectOne { .. } => Shape::Verdict { key: "keep" },
            Self::MatchAll { left, right, .. } => Shape::PairList {
                left: left.len(),
                right: right.len(),
            },
            Self::MatchOne { .. } => Shape::Verdict { key: "match" },
            Self::MatchSemi { right, .. } => Shape::IndexList {
                key: "matches",
                len: right.len(),
            },
            Self::ImputeCells { cells } => Shape::Cells {
                key: "values",
                len: cells.len(),
            },
            Self::ImputeColumnMany { rows, .. } => Shape::Cells {
                key: "values",
                len: rows.len(),
            },
            Self::ImputeCell { .. } | Self::ImputeColumnOne { .. } => Shape::Cells {
                key: "value",
                len: 1,
            },
            Self::ImputeRow { relation, .. } => Shape::Cells {
                key: "row",
                len: relation.column_count(),
            },
            Self::ClusterAll { candidates, .. } => Shape::Assignment {
                len: candidates.len(),
            },
            Self::ClusterOne { .. } => Shape::Label,
            Self::OrderAll { rows } => Shape::Ranking { len: rows.len() },
            Self::OrderPair { .. } => Shape::Verdict { key: "a_first" },
            Self::OrderScore { .. } => Shape::Score,
            Self::Judge { .. } => Shape::Verdict { key: "same" },
        }
    }

    fn element_ids(&self) -> Vec<usize> {
        let ids = |c: &[Candidate<'_>]| c.iter().map(|c| c.id).collect::<Vec<_>>();
        match self {
            Self::SelectMany { candidates, .. } | Self::ClusterAll { candidates, .. } => {
                ids(candidates)
            }
            Self::SelectOne { candidate, .. } | Self::ClusterOne { candidate, .. } => {
                vec![candidate.id]
            }
            Self::MatchAll { left, right, .. } => {
                // Left ids, then right ids.
                let mut v = ids(left);
                v.extend(ids(right));
                v
            }
            Self::MatchOne { left, right, .. } => vec![left.id, right.id],
            Self::MatchSemi { left, right, .. } => {
                let mut v = vec![left.id];
                v.extend(ids(right));
                v
            }
            Self::ImputeCells { cells } => cells.iter().map(|c| c.row).collect(),
            Self::ImputeCell { cell } => vec![cell.row],
            Self::ImputeColumnMany { rows, .. } | Self::OrderAll { rows } => ids(rows),
            Self::ImputeColumnOne { row, .. } | Self::OrderScore { row } => vec![row.id],
            Self::ImputeRow { ordinal, .. } => vec![*ordinal],
            Self::OrderPair { a, b } => vec![a.id, b.id],
            Self::Judge { .. } => vec![],
        }
    }

    fn is_empty(&self) -> bool {
        match self {
            Self::SelectMany { candidates, .. } | Self::ClusterAll { candidates, .. } => {
                candidates.is_empty()
            }
            Self::MatchAll { left, right, .. } => left.is_empty() || right.is_empty(),
            Self::MatchSemi { right, .. } => right.is_empty(),
            Self::ImputeCells { cells } => cells.is_empty(),
            Self::ImputeColumnMany { rows, .. } | Self::OrderAll { rows } => rows.is_empty(),
            Self::ImputeRow { relation, .. } => relation.column_count() == 0,
            _ => false,
        }
    }
}

/// Expected JSON answer shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Verdict { key: &'static str },
    IndexList { key: &'static str, len: usize },
    PairList { left: usize, right: usize },
    Assignment { len: usize },
    Ranking { len: usize },
    Score,
    Cells { key: &'static str, len: usize },
    Label,
}

impl Shape {
    /// Human-readable description used in the prompt's output contract.
    pub fn describe(&self) -> String {
        match *self {
            Self::Verdict { key } => format!("{{\"{key}\": true}} or {{\"{key}\": false}}"),
            Self::IndexList { key, .. } => {
                format!("{{\"{key}\": [<candidate numbers>]}}, for example {{\"{key}\": [0, 2]}}; use [] for none")
            }
            Self::PairList { .. } => {
                "{\"pairs\": [[<left number>, <right number>], ...]}, for example {\"pairs\": [[0, 1], [2, 0]]}; use [] for none".into()
            }
            Self::Assignment { .. } => {
                "{\"clusters\": [{\"label\": \"<label>\", \"members\": [<candidate numbers>]}, ...]}".into()
            }
            Self::Ranking { len } => format!(
                "{{\"ranking\": [<candidate numbers, first place first>]}} containing all {len} numbers"
            ),
            Self::Score => "{\"score\": <number from 0 to 100>}".into(),
            Self::Cells { key, len: 1 } if key != "row" && key != "values" => {
                format!("{{\"{key}\": \"<value>\"}}")
            }
            Self::Cells { key, len } => {
                format!("{{\"{key}\": [<exactly {len} string values, in order>]}}")
            }
            Self::Label => "{\"cluster\": \"<existing or new group label>\"}".into(),
        }
    }

    /// Canonical JSON serialization of a payload of this shape.
    pub fn render(&self, payload: &Payload) -> String {
        let v = match (*self, payload) {
            (Self::Verdict { key }, Payload::Verdict(b)) => json!({ key: b }),
            (Self::IndexList { key, .. }, Payload::IndexList(ix)) => json!({ key: ix }),
            (Self::PairList { .. }, Payload::PairList(p)) => {
                json!({ "pairs": p.iter().map(|&(a, b)| [a, b]).collect::<Vec<_>>() })
            }
            (Self::Assignment { .. }, Payload::Assignment(groups)) => json!({
                "clusters": groups
                    .iter()
                    .map(|g| json!({ "label": g.label, "members": g.members }))
                    .collect::<Vec<_>>()
            }),
            (Self::Ranking { .. }, Payload::Ranking(r)) => json!({ "ranking": r.order }),
            (Self::Score, Payload::Score(s)) => json!({ "score": s }),
            (Self::Cells { key, len: 1 }, Payload::Cells(c)) if key != "row" && key != "values" => {
                json!({ key: c.first() })
            }
            (Self::Cells { key, .. }, Payload::Cells(c)) => json!({ key: c }),
            (Self::Label, Payload::Label(l)) => json!({ "cluster": l }),
            (shape, payload) => panic!("payload {payload:?} does not fit shape {shape:?}"),
        };
        v.to_string()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterGroup {
    pub label: Option<String>,
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedRanking {
    /// Distinct in-bounds indices in the order given.
    pub order: Vec<usize>,
    /// False when the answer skipped or repeated candidates.
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Verdict(bool),
    IndexList(Vec<usize>),
    PairList(Vec<(usize, usize)>),
    Assignment(Vec<ClusterGroup>),
    Ranking(ParsedRanking),
    Score(f64),
    Cells(Vec<String>),
    Label(String),
}

/// A typed payload plus the completion it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Parsed {
    pub payload: Payload,
    pub raw: String,
}

/// Template set with `{{name}}` placeholders.
#[derive(Debug, Clone)]
pub struct PromptKit {
    templates: BTreeMap<&'static str, String>,
    budget: usize,
}

const TEMPLATE_NAMES: [&str; 17] = [
    "system",
    "select_many",
    "select_one",
    "match_all",
    "match_one",
    "match_semi",
    "impute_cells",
    "impute_cell",
    "impute_column_many",
    "impute_column_one",
    "impute_row",
    "cluster_all",
    "cluster_one",
    "order_all",
    "order_pair",
    "order_score",
    "judge",
];

fn builtin(name: &str) -> &'static str {
    match name {
        "system" => include_str!("../templates/system.txt"),
        "select_many" => include_str!("../templates/select_many.txt"),
        "select_one" => include_str!("../templates/select_one.txt"),
        "match_all" => include_str!("../templates/match_all.txt"),
        "match_one" => include_str!("../templates/match_one.txt"),
        "match_semi" => include_str!("../templates/match_semi.txt"),
        "impute_cells" => include_str!("../templates/impute_cells.txt"),
        "impute_cell" => include_str!("../templates/impute_cell.txt"),
        "impute_column_many" => include_str!("../templates/impute_column_many.txt"),
        "impute_column_one" => include_str!("../templates/impute_column_one.txt"),
        "impute_row" => include_str!("../templates/impute_row.txt"),
        "cluster_all" => include_str!("../templates/cluster_all.txt"),
        "cluster_one" => include_str!("../templates/cluster_one.txt"),
        "order_all" => include_str!("../templates/order_all.txt"),
        "order_pair" => include_str!("../templates/order_pair.txt"),
        "order_score" => include_str!("../templates/order_score.txt"),
        "judge" => include_str!("../templates/judge.txt"),
        _ => unreachable!("unknown template {name}"),
    }
}

impl Default for PromptKit {
    fn default() -> Self {
        Self {
            templates: TEMPLATE_NAMES
                .iter()
                .map(|&n| (n, builtin(n).trim_end().to_string()))
                .collect(),
            budget: crate::gateway::DEFAULT_MAX_CONTEXT,
        }
    }
}

impl PromptKit {
    /// Built-in templates, overridden by any `<name>.txt` found in `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut kit = Self::default();
        for name in TEMPLATE_NAMES {
            let p = dir.join(format!("{name}.txt"));
            if p.exists() {
                let text = fs::read_to_string(&p)
                    .map_err(|e| PromptError::Io(format!("{}: {e}", p.display())))?;
                kit.templates.insert(name, text.trim_end().to_string());
            }
        }
        Ok(kit)
    }

    pub fn with_budget(mut self, max_tokens: usize) -> Self {
        self.budget = max_tokens;
        self
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    fn fill(
        &self,
        name: &'static str,
        vars: &BTreeMap<&str, String>,
    ) -> Result<String, PromptError> {
        let tpl = &self.templates[name];
        let mut out = String::with_capacity(tpl.len() + 256);
        let mut rest = tpl.as_str();
        while let Some(start) = rest.find("{{") {
            out.push_str(&rest[..start]);
            let after = &rest[start + 2..];
            let end = after.find("}}").ok_or_else(|| PromptError::Template {
                template: name.into(),
                message: "unterminated placeholder".into(),
            })?;
            let key = after[..end].trim();
            let val = vars.get(key).ok_or_else(|| PromptError::Template {
                template: name.into(),
                message: format!("unknown placeholder `{key}`"),
            })?;
            out.push_str(val);
            rest = &after[end + 2..];
        }
        out.push_str(rest);
        // Drop the blank line left by an empty reasoning slot.
        Ok(out.trim_end().to_string())
    }

    /// Builds the request for one prompt. Pure: equal inputs give
    /// byte-identical requests.
    pub fn build_prompt(
        &self,
        variant: Variant,
        task: &PromptTask<'_>,
        requirement: &str,
        opts: &PromptOptions,
    ) -> Result<ChatRequest, PromptError> {
        if task.is_empty() {
            return Err(PromptError::EmptyPayload);
        }
        let render = |c: &Candidate<'_>| render_element(&c.element, opts);
        let list = |cs: &[Candidate<'_>]| numbered(cs.iter().map(render));
        let mut vars: BTreeMap<&str, String> = BTreeMap::new();
        vars.insert("requirement", requirement.to_string());
        vars.insert(
            "output",
            format!("Answer format (JSON): {}", task.shape().describe()),
        );
        vars.insert(
            "reasoning",
            if opts.cot {
                "Think through the requirement step by step first, then finish your reply with the JSON answer.".into()
            } else {
                "Reply with the JSON answer only.".into()
            },
        );
        let g = match task {
            PromptTask::SelectMany { g, .. }
            | PromptTask::SelectOne { g, .. }
            | PromptTask::MatchAll { g, .. }
            | PromptTask::MatchOne { g, .. }
            | PromptTask::MatchSemi { g, .. }
            | PromptTask::ClusterAll { g, .. }
            | PromptTask::ClusterOne { g, .. } => Some(*g),
            _ => None,
        };
        if let Some(g) = g {
            vars.insert("granularity", g.to_string());
        }
        match task {
            PromptTask::SelectMany { candidates, .. }
            | PromptTask::ClusterAll { candidates, .. } => {
                vars.insert("count", candidates.len().to_string());
                vars.insert("candidates", list(candidates));
            }
            PromptTask::SelectOne { candidate, .. } => {
                vars.insert("candidates", render(candidate));
            }
            PromptTask::ClusterOne {
                clusters,
                candidate,
                ..
            } => {
                vars.insert("candidates", render(candidate));
                let text = if clusters.is_empty() {
                    "(none yet)".to_string()
                } else {
                    clusters
                        .iter()
                        .map(|(label, members)| format!("- {label}: {}", members.join(" | ")))
                        .collect::<Vec<_>>()
                        .join("\n")
                };
                vars.insert("clusters", text);
            }
            PromptTask::MatchAll { left, right, .. } => {
                vars.insert("left_count", left.len().to_string());
                vars.insert("right_count", right.len().to_string());
                vars.insert("left", list(left));
                vars.insert("right", list(right));
            }
            PromptTask::MatchOne { left, right, .. } => {
                vars.insert("left", render(left));
                vars.insert("right", render(right));
            }
            PromptTask::MatchSemi { left, right, .. } => {
                vars.insert("left", render(left));
                vars.insert("right_count", right.len().to_string());
                vars.insert("right", list(right));
            }
            PromptTask::ImputeCells { cells } => {
                vars.insert("count", cells.len().to_string());
                vars.insert(
                    "candidates",
                    numbered(cells.iter().map(|c| missing_text(c, opts))),
                );
            }
            PromptTask::ImputeCell { cell } => {
                vars.insert("candidates", missing_text(cell, opts));
            }
            PromptTask::ImputeColumnMany { column, rows } => {
                vars.insert("column", column.to_string());
                vars.insert("count", rows.len().to_string());
                vars.insert("candidates", list(rows));
            }
            PromptTask::ImputeColumnOne { column, row } => {
                vars.insert("column", column.to_string());
                vars.insert("candidates", render(row));
            }
            PromptTask::ImputeRow { relation, .. } => {
                vars.insert("table", relation.name().to_string());
                vars.insert("schema", relation.columns().join(", "));
                vars.insert("count", relation.row_count().to_string());
                let rows: Vec<String> = relation
                    .rows()
                    .iter()
                    .map(|r| row_text(relation.columns(), r))
                    .collect();
                vars.insert(
                    "candidates",
                    if rows.is_empty() {
                        "(none)".into()
                    } else {
                        numbered(rows)
                    },
                );
            }
            PromptTask::OrderAll { rows } => {
                vars.insert("count", rows.len().to_string());
                vars.insert("candidates", list(rows));
            }
            PromptTask::OrderPair { a, b } => {
                vars.insert("left", render(a));
                vars.insert("right", render(b));
            }
            PromptTask::OrderScore { row } => {
                vars.insert("candidates", render(row));
            }
            PromptTask::Judge { a, b } => {
                vars.insert("left", a.to_string());
                vars.insert("right", b.to_string());
            }
        }
        let system = self.fill("system", &vars)?;
        let user = self.fill(task.template(), &vars)?;
        let tokens = estimate_tokens(&system) + estimate_tokens(&user);
        if tokens > self.budget {
            return Err(PromptError::ContextOverflow {
                tokens,
                limit: self.budget,
            });
        }
        Ok(ChatRequest::new(
            system,
            user,
            RequestTag {
                op: task.kind().map_or("judge", LroKind::as_str).to_string(),
                variant: variant.to_string(),
                elements: task.element_ids(),
            },
        ))
    }
}

fn missing_text(c: &MissingCell<'_>, opts: &PromptOptions) -> String {
    format!(
        "column \"{}\" of row: {}",
        c.column,
        render_element(&c.row_element, opts)
    )
}

/// Finds the last top-level JSON object or array in `text`, falling back to
/// the whole trimmed text as a bare JSON scalar.
pub fn extract_json(text: &str) -> Option<Value> {
    let mut last = None;
    let mut i = 0;
    let bytes = text.as_bytes();
    while i < bytes.len() {
        if bytes[i] == b'{' || bytes[i] == b'[' {
            let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<Value>();
            if let Some(Ok(v)) = stream.next() {
                last = Some(v);
                i += stream.byte_offset();
                continue;
            }
        }
        i += 1;
    }
    if last.is_some() {
        return last;
    }
    let t = text.trim().trim_end_matches('.');
    serde_json::from_str(t).ok().or_else(|| {
        // A trailing bare token such as `... so the answer is true`.
        let tok = t.rsplit(char::is_whitespace).next()?;
        serde_json::from_str(tok).ok()
    })
}

/// Unwraps `{"key": x}`-style objects: returns the value under `key`, or the
/// only value of a single-entry object, or the first value matching `pred`.
fn unwrap_object<'v>(v: &'v Value, key: &str, pred: impl Fn(&Value) -> bool) -> Option<&'v Value> {
    match v {
        Value::Object(m) => m
            .get(key)
            .or_else(|| (m.len() == 1).then(|| m.values().next()).flatten())
            .or_else(|| m.values().find(|x| pred(x))),
        other => Some(other),
    }
}

fn as_index(v: &Value, len: usize) -> Result<usize, ParseError> {
    let n = v
        .as_u64()
        .or_else(|| {
            v.as_f64()
                .filter(|f| f.fract() == 0.0 && *f >= 0.0)
                .map(|f| f as u64)
        })
        .or_else(|| v.as_str().and_then(|s| s.trim().parse().ok()))
        .ok_or_else(|| ParseError::Malformed(format!("expected a candidate number, got {v}")))?
        as usize;
    if n >= len {
        return Err(ParseError::OutOfBounds { index: n, len });
    }
    Ok(n)
}

fn index_list(v: &Value, len: usize) -> Result<Vec<usize>, ParseError> {
    let arr = v
        .as_array()
        .ok_or_else(|| ParseError::Malformed(format!("expected an array, got {v}")))?;
    arr.iter().map(|x| as_index(x, len)).collect()
}

fn as_text(v: &Value) -> Result<String, ParseError> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        Value::Bool(b) => Ok(b.to_string()),
        other => Err(ParseError::Malformed(format!(
            "expected a text value, got {other}"
        ))),
    }
}

/// Parses a completion against the expected shape.
pub fn parse(shape: Shape, text: &str) -> Result<Parsed, ParseError> {
    let v =
        extract_json(text).ok_or_else(|| ParseError::Malformed("no JSON value found".into()))?;
    let missing = || ParseError::Malformed(format!("unexpected JSON {v}"));
    let payload = match shape {
        Shape::Verdict { key } => {
            let b = unwrap_object(&v, key, Value::is_boolean)
                .and_then(|x| match x {
                    Value::Bool(b) => Some(*b),
                    Value::String(s) => match s.trim().to_ascii_lowercase().as_str() {
                        "true" | "yes" => Some(true),
                        "false" | "no" => Some(false),
                        _ => None,
                    },
                    _ => None,
                })
                .ok_or_else(missing)?;
            Payload::Verdict(b)
        }
        Shape::IndexList { key, len } => {
            let arr = unwrap_object(&v, key, Value::is_array).ok_or_else(missing)?;
            let mut ix = index_list(arr, len)?;
            let mut seen = vec![false; len];
            ix.retain(|&i| !std::mem::replace(&mut seen[i], true));
            Payload::IndexList(ix)
        }
        Shape::PairList { left, right } => {
            let arr = unwrap_object(&v, "pairs", Value::is_array).ok_or_else(missing)?;
            let arr = arr.as_array().ok_or_else(missing)?;
            let mut pairs = Vec::with_capacity(arr.len());
            for p in arr {
                let (a, b) = match p {
                    Value::Array(xs) if xs.len() == 2 => (&xs[0], &xs[1]),
                    Value::Object(m) => match (m.get("left"), m.get("right")) {
                        (Some(a), Some(b)) => (a, b),
                        _ => return Err(ParseError::Malformed(format!("bad pair {p}"))),
                    },
                    _ => return Err(ParseError::Malformed(format!("bad pair {p}"))),
                };
                let pair = (as_index(a, left)?, as_index(b, right)?);
                if !pairs.contains(&pair) {
                    pairs.push(pair);
                }
            }
            Payload::PairList(pairs)
        }
        Shape::Assignment { len } => {
            let arr = unwrap_object(&v, "clusters", Value::is_array).ok_or_else(missing)?;
            let arr = arr.as_array().ok_or_else(missing)?;
            let mut groups = Vec::with_capacity(arr.len());
            for g in arr {
                let (label, members) = match g {
                    Value::Object(m) => (
                        m.get("label").map(as_text).transpose()?,
                        m.get("members").ok_or_else(|| {
                            ParseError::Malformed(format!("group without members: {g}"))
                        })?,
                    ),
                    Value::Array(_) => (None, g),
                    _ => return Err(ParseError::Malformed(format!("bad group {g}"))),
                };
                groups.push(ClusterGroup {
                    label,
                    members: index_list(members, len)?,
                });
            }
            Payload::Assignment(groups)
        }
        Shape::Ranking { len } => {
            let arr = unwrap_object(&v, "ranking", Value::is_array).ok_or_else(missing)?;
            let raw = index_list(arr, len)?;
            let mut seen = vec![false; len];
            let order: Vec<usize> = raw
                .iter()
                .copied()
                .filter(|&i| !std::mem::replace(&mut seen[i], true))
                .collect();
            let complete = raw.len() == len && order.len() == len;
            Payload::Ranking(ParsedRanking { order, complete })
        }
        Shape::Score => {
            let x = unwrap_object(&v, "score", Value::is_number).ok_or_else(missing)?;
            let s = x
                .as_f64()
                .or_else(|| x.as_str().and_then(|s| s.trim().parse().ok()))
                .ok_or_else(missing)?;
            if !(0.0..=100.0).contains(&s) {
                return Err(ParseError::ScoreRange(s));
            }
            Payload::Score(s)
        }
        Shape::Cells { key, len } => {
            let x =
                unwrap_object(&v, key, |x| x.is_array() || x.is_string()).ok_or_else(missing)?;
            let cells = match x {
                Value::Array(xs) => xs.iter().map(as_text).collect::<Result<Vec<_>, _>>()?,
                other if len == 1 => vec![as_text(other)?],
                _ => return Err(missing()),
            };
            if cells.len() != len {
                return Err(ParseError::Malformed(format!(
                    "expected {len} values, got {}",
                    cells.len()
                )));
            }
            Payload::Cells(cells)
        }
        Shape::Label => {
            let x = unwrap_object(&v, "cluster", Value::is_string).ok_or_else(missing)?;
            let l = as_text(x)?;
            if l.trim().is_empty() {
                return Err(ParseError::Malformed("empty cluster label".into()));
            }
            Payload::Label(l.trim().to_string())
        }
    };
    Ok(Parsed {
        payload,
        raw: text.to_string(),
    })
}

/// Appended to the prompt when a completion failed to parse.
pub fn format_reminder(shape: Shape, err: &ParseError) -> String {
    format!(
        "\n\nYour previous answer could not be used ({err}). End your reply with exactly one JSON value of the form {}.",
        shape.describe()
    )
}
