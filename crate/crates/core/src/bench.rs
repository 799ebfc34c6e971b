//! Query-spec suites: loading, stratification, execution and reports.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use futures::StreamExt;
use serde::{Deserialize, Serialize};
use tokio::time::Instant;

use crate::gateway::{cost, CostSummary, PriceTable, UsageLedger};
use crate::metrics::{
    ari, exact_match_ratio, hit_rate_at_k, kendall_tau_on_hits, llm_judge_score, nmi, prf,
    table_exact_match, Canon, SetMetrics,
};
use crate::operators::{Engine, LroKind};
use crate::plan::{execute, parse_plan_checked, Plan, PlanNode};
use crate::relation::{
    load_relation, Cell, Database, Granularity, LoadOptions, Relation, RelationError,
};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("malformed suite {path}: {message}")]
    Malformed { path: String, message: String },
    #[error("query `{id}`: {message}")]
    InvalidSpec { id: String, message: String },
    #[error(transparent)]
    Relation(#[from] RelationError),
}

fn io_err(path: &Path, e: impl fmt::Display) -> BenchError {
    BenchError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Per-dimension difficulty annotations, each on a 1 to 3 scale except
/// `lro_count`, which is the raw number of operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotations {
    pub lro_count: u8,
    #[serde(default = "one")]
    pub table_count: u8,
    #[serde(default = "one")]
    pub hop_count: u8,
    #[serde(default = "one")]
    pub knowledge_level: u8,
}

fn one() -> u8 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GroundTruth {
    Inline {
        columns: Vec<String>,
        rows: Vec<Vec<Cell>>,
    },
    File {
        file: PathBuf,
    },
}

/// One benchmark query as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuerySpec {
    pub id: String,
    #[serde(default)]
    pub question: String,
    /// Name of the database the plan runs against.
    pub database: String,
    pub plan: String,
    pub ground_truth: GroundTruth,
    pub annotations: Annotations,
    /// Defaults to whether the plan ends in an ordering step.
    #[serde(default)]
    pub order_sensitive: Option<bool>,
    /// Cutoff for ranking metrics; defaults to the ground-truth row count.
    #[serde(default)]
    pub k: Option<usize>,
}

/// A spec with its plan parsed and its ground truth loaded.
#[derive(Debug, Clone)]
pub struct PreparedSpec {
    pub spec: QuerySpec,
    pub plan: Plan,
    pub truth: Relation,
    pub order_sensitive: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    Easy,
    Medium,
    Hard,
    /// Single-operator queries, which are not stratified.
    Single,
}

impl Bucket {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Easy => "easy",
            Self::Medium => "medium",
            Self::Hard => "hard",
            Self::Single => "single",
        }
    }
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Bucket cut points: `overall <= easy_max` is easy, `overall <= medium_max`
/// is medium, anything above is hard.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    pub easy_max: u8,
    pub medium_max: u8,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            easy_max: 5,
            medium_max: 8,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<(), String> {
        if self.easy_max >= self.medium_max {
            return Err(format!(
                "easy_max ({}) must be below medium_max ({})",
                self.easy_max, self.medium_max
            ));
        }
        Ok(())
    }

    pub fn bucket(&self, overall: u8) -> Bucket {
        if overall <= self.easy_max {
            Bucket::Easy
        } else if overall <= self.medium_max {
            Bucket::Medium
        } else {
            Bucket::Hard
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StratifiedScore {
    pub lro: u8,
    pub tables: u8,
    pub hops: u8,
    pub knowledge: u8,
    pub overall: u8,
    pub bucket: Bucket,
}

/// Difficulty score of a multi-operator query: two operators score 1,
/// three score 3, and the other dimensions pass through. Single-operator
/// queries are not stratified and yield `None`.
pub fn stratify(a: &Annotations, t: &Thresholds) -> Result<Option<StratifiedScore>, String> {
    let lro = match a.lro_count {
        1 => return Ok(None),
        2 => 1,
        3 => 3,
        n => return Err(format!("lro_count must be 1, 2 or 3, got {n}")),
    };
    for (name, v) in [
        ("table_count", a.table_count),
        ("hop_count", a.hop_count),
        ("knowledge_level", a.knowledge_level),
    ] {
        if !(1..=3).contains(&v) {
            return Err(format!("{name} must be between 1 and 3, got {v}"));
        }
    }
    let overall = lro + a.table_count + a.hop_count + a.knowledge_level;
    Ok(Some(StratifiedScore {
        lro,
        tables: a.table_count,
        hops: a.hop_count,
        knowledge: a.knowledge_level,
        overall,
        bucket: t.bucket(overall),
    }))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SuiteFile {
    Named {
        #[serde(default)]
        name: Option<String>,
        queries: Vec<QuerySpec>,
    },
    Bare(Vec<QuerySpec>),
}

#[derive(Debug, Clone)]
pub struct Suite {
    pub name: String,
    pub specs: Vec<QuerySpec>,
    /// Directory that relative ground-truth paths resolve against.
    pub base_dir: PathBuf,
}

impl Suite {
    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let (name, specs) =
            match serde_json::from_str::<SuiteFile>(&text).map_err(|e| BenchError::Malformed {
                path: path.display().to_string(),
                message: e.to_string(),
            })? {
                SuiteFile::Named { name, queries } => (name, queries),
                SuiteFile::Bare(q) => (None, q),
            };
        let name = name.unwrap_or_else(|| {
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        });
        Ok(Self {
            name,
            specs,
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    /// Parses every plan against its database and loads every ground truth.
    pub fn prepare(
        &self,
        dbs: &BTreeMap<String, Database>,
    ) -> Result<Vec<PreparedSpec>, BenchError> {
        self.specs
            .iter()
            .map(|s| prepare(s, &self.base_dir, dbs))
            .collect()
    }
}

pub fn prepare(
    spec: &QuerySpec,
    base_dir: &Path,
    dbs: &BTreeMap<String, Database>,
) -> Result<PreparedSpec, BenchError> {
    let invalid = |message: String| BenchError::InvalidSpec {
        id: spec.id.clone(),
        message,
    };
    if !(1..=3).contains(&spec.annotations.lro_count) {
        return Err(invalid(format!(
            "lro_count must be 1, 2 or 3, got {}",
            spec.annotations.lro_count
        )));
    }
    let db = dbs
        .get(&spec.database)
        .ok_or_else(|| invalid(format!("unknown database `{}`", spec.database)))?;
    let plan = parse_plan_checked(&spec.plan, db).map_err(|e| invalid(format!("plan: {e}")))?;
    if plan.lro_count() != usize::from(spec.annotations.lro_count) {
        return Err(invalid(format!(
            "annotated lro_count {} but the plan has {} operators",
            spec.annotations.lro_count,
            plan.lro_count()
        )));
    }
    let truth = match &spec.ground_truth {
        GroundTruth::Inline { columns, rows } => {
            Relation::new("truth", columns.clone(), rows.clone())?
        }
        GroundTruth::File { file } => {
            load_relation(&base_dir.join(file), None, &LoadOptions::default())?
        }
    };
    let order_sensitive = spec
        .order_sensitive
        .unwrap_or_else(|| plan.order_sensitive());
    Ok(PreparedSpec {
        spec: spec.clone(),
        plan,
        truth,
        order_sensitive,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Pass,
    Fail,
    Error,
    Timeout,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Pass => "pass",
            Self::Fail => "fail",
            Self::Error => "error",
            Self::Timeout => "timeout",
        }
    }
}

/// Operator-level scores of a single-operator query.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct QueryMetrics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub set: Option<SetMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact_match: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub judge: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ari: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nmi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hit_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    /// Why a metric could not be computed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryResult {
    pub id: String,
    pub bucket: Bucket,
    pub score: Option<u8>,
    pub outcome: Outcome,
    pub metrics: QueryMetrics,
    pub calls: usize,
    pub input_tokens: u64,
    pub output_tokens: u64,
    /// Dollar cost of this query's ledger; absent when a model has no price.
    pub cost: Option<f64>,
    pub wall_ms: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip)]
    pub ledger: UsageLedger,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Accuracy {
    pub total: usize,
    pub passed: usize,
    pub accuracy: f64,
}

impl Accuracy {
    fn of<'a>(results: impl Iterator<Item = &'a QueryResult>) -> Self {
        let (mut total, mut passed) = (0, 0);
        for r in results {
            total += 1;
            passed += usize::from(r.outcome == Outcome::Pass);
        }
        Self {
            total,
            passed,
            accuracy: if total == 0 {
                0.0
            } else {
                passed as f64 / total as f64
            },
        }
    }

    /// Percentage with two decimals, as in `86.67%`.
    pub fn percent(&self) -> String {
        format!("{:.2}%", self.accuracy * 100.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub suite: String,
    pub model: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub judge_model: Option<String>,
    pub thresholds: Thresholds,
    pub overall: Accuracy,
    pub by_bucket: BTreeMap<Bucket, Accuracy>,
    pub cost: Option<CostSummary>,
    pub queries: Vec<QueryResult>,
}

#[derive(Debug, Clone, Default)]
pub struct BenchConfig {
    pub thresholds: Thresholds,
    pub prices: PriceTable,
    pub canon: Canon,
    /// Run specs concurrently; each still has its own ledger.
    pub concurrent: bool,
}

/// Runs every spec independently. Failures and timeouts are recorded in
/// the report and never stop the suite.
pub async fn run_suite(
    name: &str,
    specs: &[PreparedSpec],
    dbs: &BTreeMap<String, Database>,
    engine: &Engine,
    judge: Option<&Engine>,
    cfg: &BenchConfig,
) -> Report {
    let queries: Vec<QueryResult> = if cfg.concurrent {
        futures::stream::iter(specs)
            .map(|s| run_one(s, &dbs[&s.spec.database], engine, judge, cfg))
            .buffered(specs.len().max(1))
            .collect()
            .await
    } else {
        let mut out = Vec::with_capacity(specs.len());
        for s in specs {
            out.push(run_one(s, &dbs[&s.spec.database], engine, judge, cfg).await);
        }
        out
    };
    build_report(
        name,
        engine.gateway().model(),
        judge.map(|j| j.gateway().model()),
        cfg,
        queries,
    )
}

fn build_report(
    name: &str,
    model: &str,
    judge_model: Option<&str>,
    cfg: &BenchConfig,
    queries: Vec<QueryResult>,
) -> Report {
    let mut buckets: Vec<Bucket> = queries.iter().map(|q| q.bucket).collect();
    buckets.sort_unstable();
    buckets.dedup();
    let by_bucket = buckets
        .into_iter()
        .map(|b| (b, Accuracy::of(queries.iter().filter(|q| q.bucket == b))))
        .collect();
    let mut all = UsageLedger::default();
    for q in &queries {
        all.append(&q.ledger);
    }
    Report {
        suite: name.to_string(),
        model: model.to_string(),
        judge_model: judge_model.map(str::to_string),
        thresholds: cfg.thresholds,
        overall: Accuracy::of(queries.iter()),
        by_bucket,
        cost: cost(&all, &cfg.prices).ok(),
        queries,
    }
}

async fn run_one(
    s: &PreparedSpec,
    db: &Database,
    engine: &Engine,
    judge: Option<&Engine>,
    cfg: &BenchConfig,
) -> QueryResult {
    let score = stratify(&s.spec.annotations, &cfg.thresholds)
        .ok()
        .flatten();
    let start = Instant::now();
    let run = execute(&s.plan, db, engine).await;
    let wall_ms = start.elapsed().as_millis() as u64;
    let (outcome, metrics, ledger, error) = match run {
        Ok(exec) => {
            let pass = table_exact_match(&exec.output, &s.truth, s.order_sensitive, cfg.canon);
            let metrics = if s.plan.lro_count() == 1 {
                single_metrics(s, &exec.output, judge, engine.gateway().model(), cfg.canon).await
            } else {
                QueryMetrics::default()
            };
            let outcome = if pass { Outcome::Pass } else { Outcome::Fail };
            (outcome, metrics, exec.ledger, None)
        }
        Err(e) => {
            let outcome = if e.is_timeout() {
                Outcome::Timeout
            } else {
                Outcome::Error
            };
            log::warn!("query {}: {e}", s.spec.id);
            (
                outcome,
                QueryMetrics::default(),
                e.ledger.clone(),
                Some(e.to_string()),
            )
        }
    };
    QueryResult {
        id: s.spec.id.clone(),
        bucket: score.map_or(Bucket::Single, |sc| sc.bucket),
        score: score.map(|sc| sc.overall),
        outcome,
        metrics,
        calls: ledger.calls(),
        input_tokens: ledger.input_tokens(),
        output_tokens: ledger.output_tokens(),
        cost: cost(&ledger, &cfg.prices).ok().map(|c| c.total),
        wall_ms,
        error,
        ledger,
    }
}

fn row_key(row: &[Cell], canon: Canon) -> String {
    row.iter()
        .map(|c| {
            c.as_deref()
                .map_or_else(|| "\u{0}".to_string(), |v| canon.apply(v))
        })
        .collect::<Vec<_>>()
        .join("\u{1f}")
}

fn row_keys(r: &Relation, canon: Canon) -> Vec<String> {
    r.rows().iter().map(|row| row_key(row, canon)).collect()
}

/// (element key, cluster label) pairs of a clustered output: the `cluster`
/// column is the label and the other cells form the key.
fn cluster_pairs(r: &Relation, canon: Canon) -> Option<BTreeMap<String, String>> {
    let ci = r.columns().iter().position(|c| c == "cluster")?;
    let mut out = BTreeMap::new();
    for row in r.rows() {
        let key: Vec<Cell> = row
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != ci)
            .map(|(_, c)| c.clone())
            .collect();
        out.insert(row_key(&key, canon), row[ci].clone().unwrap_or_default());
    }
    Some(out)
}

async fn single_metrics(
    s: &PreparedSpec,
    pred: &Relation,
    judge: Option<&Engine>,
    task_model: &str,
    canon: Canon,
) -> QueryMetrics {
    let mut m = QueryMetrics::default();
    let Some(node) = s.plan.root().chain().into_iter().find(|n| n.is_lro()) else {
        return m;
    };
    let truth = &s.truth;
    match node {
        PlanNode::LroSelect {
            g: Granularity::Column,
            ..
        } => {
            m.set = Some(prf(pred.columns(), truth.columns(), canon));
        }
        PlanNode::LroSelect { .. } | PlanNode::LroMatchJoin { .. } => {
            m.set = Some(prf(&row_keys(pred, canon), &row_keys(truth, canon), canon));
        }
        PlanNode::LroImpute { .. } => {
            let flat = |r: &Relation| -> Vec<String> {
                r.rows()
                    .iter()
                    .flatten()
                    .map(|c| c.clone().unwrap_or_default())
                    .collect()
            };
            let (p, t) = (flat(pred), flat(truth));
            match exact_match_ratio(&p, &t, canon) {
                Ok(em) => m.exact_match = Some(em),
                Err(e) => m.note = Some(e.to_string()),
            }
            if let (Some(j), true) = (judge, p.len() == t.len()) {
                match llm_judge_score(&p, &t, j, task_model, canon).await {
                    Ok(v) => m.judge = Some(v),
                    Err(e) => m.note = Some(e.to_string()),
                }
            }
        }
        PlanNode::LroCluster { .. } => {
            match (cluster_pairs(pred, canon), cluster_pairs(truth, canon)) {
                (Some(p), Some(t)) if p.keys().eq(t.keys()) => {
                    let pl: Vec<&String> = p.values().collect();
                    let tl: Vec<&String> = t.values().collect();
                    m.ari = ari(&pl, &tl).ok();
                    m.nmi = nmi(&pl, &tl).ok();
                }
                _ => m.note = Some("clustered output and truth cover different elements".into()),
            }
        }
        PlanNode::LroOrder { .. } => {
            let (p, t) = (row_keys(pred, canon), row_keys(truth, canon));
            let k = s.spec.k.unwrap_or(t.len());
            match (hit_rate_at_k(&p, &t, k), kendall_tau_on_hits(&p, &t, k)) {
                (Ok(h), Ok(tau)) => {
                    m.hit_rate = Some(h);
                    m.tau = Some(tau);
                }
                (Err(e), _) | (_, Err(e)) => m.note = Some(e.to_string()),
            }
        }
        _ => {}
    }
    m
}

/// Operator kind of a single-operator plan.
pub fn single_kind(plan: &Plan) -> Option<LroKind> {
    if plan.lro_count() != 1 {
        return None;
    }
    plan.root().chain().into_iter().find_map(|n| match n {
        PlanNode::LroSelect { .. } => Some(LroKind::Select),
        PlanNode::LroMatchJoin { .. } => Some(LroKind::Match),
        PlanNode::LroImpute { .. } => Some(LroKind::Impute),
        PlanNode::LroCluster { .. } => Some(LroKind::Cluster),
        PlanNode::LroOrder { .. } => Some(LroKind::Order),
        _ => None,
    })
}

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "queries.csv";

const CSV_HEADER: [&str; 18] = [
    "id",
    "bucket",
    "score",
    "outcome",
    "calls",
    "input_tokens",
    "output_tokens",
    "cost",
    "wall_ms",
    "precision",
    "recall",
    "f1",
    "exact_match",
    "judge",
    "ari",
    "nmi",
    "hit_rate",
    "tau",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Per-query CSV with rows grouped by bucket (easy, medium, hard, single),
/// keeping suite order inside each bucket.
pub fn report_csv(report: &Report) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory write");
    let mut rows: Vec<&QueryResult> = report.queries.iter().collect();
    rows.sort_by_key(|q| q.bucket);
    for q in rows {
        let set = q.metrics.set;
        w.write_record([
            q.id.clone(),
            q.bucket.to_string(),
            opt(q.score),
            q.outcome.as_str().to_string(),
            q.calls.to_string(),
            q.input_tokens.to_string(),
            q.output_tokens.to_string(),
            opt(q.cost),
            q.wall_ms.to_string(),
            opt(set.map(|s| s.precision)),
            opt(set.map(|s| s.recall)),
            opt(set.map(|s| s.f1)),
            opt(q.metrics.exact_match),
            opt(q.metrics.judge),
            opt(q.metrics.ari),
            opt(q.metrics.nmi),
            opt(q.metrics.hit_rate),
            opt(q.metrics.tau),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("csv is utf-8")
}

pub fn report_json(report: &Report) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

/// Writes `report.json` and `queries.csv` into `dir`.
pub fn emit_report(report: &Report, dir: &Path) -> Result<(), BenchError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    for (file, body) in [
        (REPORT_JSON, report_json(report)),
        (REPORT_CSV, report_csv(report)),
    ] {
        let path = dir.join(file);
        std::fs::write(&path, body).map_err(|e| io_err(&path, e))?;
    }
    Ok(())
}

/// Plain-text summary: accuracy overall and per bucket, then cost.
pub fn summary_table(report: &Report) -> String {
    let mut out = format!(
        "{:<8} {:>6} {:>6} {:>9}\n",
        "bucket", "total", "passed", "accuracy"
    );
    for (b, a) in &report.by_bucket {
        out.push_str(&format!(
            "{:<8} {:>6} {:>6} {:>9}\n",
            b.as_str(),
            a.total,
            a.passed,
            a.percent()
        ));
    }
    let a = report.overall;
    out.push_str(&format!(
        "{:<8} {:>6} {:>6} {:>9}\n",
        "overall",
        a.total,
        a.passed,
        a.percent()
    ));
    match &report.cost {
        Some(c) => out.push_str(&format!("cost: ${:.6}\n", c.total)),
        None => out.push_str("cost: unpriced model\n"),
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{BackendConfig, MockReply, MockScript, Price};
    use crate::operators::testkit::{engine, engine_with};
    use proptest::prelude::*;
    use std::time::Duration;

    fn ann(lro_count: u8, t: u8, h: u8, k: u8) -> Annotations {
        Annotations {
            lro_count,
            table_count: t,
            hop_count: h,
            knowledge_level: k,
        }
    }

    #[test]
    fn stratification_mapping() {
        let t = Thresholds::default();
        let s = stratify(&ann(2, 1, 1, 1), &t).unwrap().unwrap();
        assert_eq!((s.overall, s.bucket), (4, Bucket::Easy));
        let s = stratify(&ann(3, 3, 3, 3), &t).unwrap().unwrap();
        assert_eq!((s.overall, s.bucket), (12, Bucket::Hard));
        let s = stratify(&ann(2, 2, 2, 2), &t).unwrap().unwrap();
        assert_eq!((s.lro, s.overall, s.bucket), (1, 7, Bucket::Medium));
        assert_eq!(stratify(&ann(1, 3, 3, 3), &t).unwrap(), None);
        assert!(stratify(&ann(4, 1, 1, 1), &t).is_err());
        assert!(stratify(&ann(2, 0, 1, 1), &t).is_err());
        let tight = Thresholds {
            easy_max: 4,
            medium_max: 6,
        };
        assert_eq!(
            stratify(&ann(2, 2, 1, 1), &tight).unwrap().unwrap().bucket,
            Bucket::Medium
        );
        assert!(Thresholds {
            easy_max: 6,
            medium_max: 6
        }
        .validate()
        .is_err());
    }

    proptest! {
        #[test]
        fn overall_is_the_dimension_sum(l in prop::sample::select(vec![2u8, 3]), t in 1u8..=3, h in 1u8..=3, k in 1u8..=3) {
            let s = stratify(&ann(l, t, h, k), &Thresholds::default()).unwrap().unwrap();
            prop_assert_eq!(s.overall, s.lro + t + h + k);
            prop_assert!((4..=12).contains(&s.overall));
        }
    }

    fn restaurants() -> Database {
        let r = Relation::from_strs(
            "Restaurants",
            &["Name", "Location"],
            &[
                &["Alley Wok", "Palo Alto"],
                &["Tokyo Table", "Seattle"],
                &["Pho Saigon", "San Jose"],
            ],
        )
        .unwrap();
        Database::new(vec![r]).unwrap()
    }

    fn dbs() -> BTreeMap<String, Database> {
        BTreeMap::from([("food".to_string(), restaurants())])
    }

    fn spec(id: &str, plan: &str, truth: &[&str], lro_count: u8) -> QuerySpec {
        QuerySpec {
            id: id.into(),
            question: String::new(),
            database: "food".into(),
            plan: plan.into(),
            ground_truth: GroundTruth::Inline {
                columns: vec!["Name".into()],
                rows: truth.iter().map(|t| vec![Some(t.to_string())]).collect(),
            },
            annotations: ann(lro_count, 1, 1, 1),
            order_sensitive: None,
            k: None,
        }
    }

    fn bay_rule() -> MockScript {
        MockScript::new()
            .rule(|req| {
                (req.tag.op == "select").then(|| {
                    let bay = req.user.contains("Palo Alto") || req.user.contains("San Jose");
                    MockReply::from(format!("{{\"keep\": {bay}}}"))
                })
            })
            .rule(|req| (req.tag.op == "order").then(|| MockReply::from("{\"ranking\": [1, 0]}")))
    }

    const SELECT_ONLY: &str =
        "SELECT Name FROM Restaurants WHERE LLM_SELECT('row', 'in the Bay Area')";
    const SELECT_ORDER: &str =
        "SELECT Name FROM Restaurants WHERE LLM_SELECT('row', 'in the Bay Area') ORDER BY LLM_ORDER('row', 'tastiest')";

    #[tokio::test(start_paused = true)]
    async fn single_spec_suite_passes_with_metrics() {
        let (eng, _) = engine(bay_rule());
        let s = spec("q1", SELECT_ONLY, &["Alley Wok", "Pho Saigon"], 1);
        let prepared = vec![prepare(&s, Path::new("."), &dbs()).unwrap()];
        let r = run_suite("t", &prepared, &dbs(), &eng, None, &BenchConfig::default()).await;
        assert_eq!(r.overall.accuracy, 1.0);
        assert_eq!(r.queries[0].bucket, Bucket::Single);
        assert_eq!(r.queries[0].metrics.set.unwrap().f1, 1.0);
        assert_eq!(r.queries[0].calls, 3);
    }

    #[tokio::test(start_paused = true)]
    async fn ranking_metrics_for_order_queries() {
        let (eng, _) = engine(bay_rule());
        let mut s = spec(
            "o",
            "SELECT Name FROM Restaurants ORDER BY LLM_ORDER('row', 'x')",
            &["Tokyo Table", "Alley Wok", "Pho Saigon"],
            1,
        );
        s.k = Some(2);
        let prepared = vec![prepare(&s, Path::new("."), &dbs()).unwrap()];
        let (eng2, _) = engine(MockScript::new().otherwise("{\"ranking\": [1, 0, 2]}"));
        let r = run_suite("t", &prepared, &dbs(), &eng2, None, &BenchConfig::default()).await;
        assert_eq!(r.queries[0].outcome, Outcome::Pass);
        assert_eq!(r.queries[0].metrics.hit_rate, Some(1.0));
        assert_eq!(r.queries[0].metrics.tau, Some(1.0));
        drop(eng);
    }

    #[tokio::test(start_paused = true)]
    async fn timeout_is_isolated() {
        let cfg = BackendConfig {
            timeout: Duration::from_secs(5),
            ..BackendConfig::default()
        };
        let script = bay_rule().latency(|req, _| {
            if req.tag.op == "order" {
                Duration::from_secs(60)
            } else {
                Duration::from_millis(10)
            }
        });
        let (eng, _) = engine_with(script, cfg);
        let specs = [
            spec("slow", SELECT_ORDER, &["Pho Saigon", "Alley Wok"], 2),
            spec("fast", SELECT_ONLY, &["Alley Wok", "Pho Saigon"], 1),
        ];
        let prepared: Vec<_> = specs
            .iter()
            .map(|s| prepare(s, Path::new("."), &dbs()).unwrap())
            .collect();
        let r = run_suite("t", &prepared, &dbs(), &eng, None, &BenchConfig::default()).await;
        assert_eq!(r.queries[0].outcome, Outcome::Timeout);
        assert_eq!(r.queries[1].outcome, Outcome::Pass);
        assert_eq!(r.overall.passed, 1);
    }

    #[tokio::test(start_paused = true)]
    async fn accuracy_ignores_spec_order_and_costs_match_ledgers() {
        let (eng, _) = engine(bay_rule());
        let specs = [
            spec("a", SELECT_ORDER, &["Pho Saigon", "Alley Wok"], 2),
            spec("b", SELECT_ORDER, &["Alley Wok", "Pho Saigon"], 2),
            spec("c", SELECT_ONLY, &["Pho Saigon", "Alley Wok"], 1),
        ];
        let cfg = BenchConfig {
            prices: PriceTable::from([(
                "mock".to_string(),
                Price {
                    input: 1.0,
                    output: 2.0,
                },
            )]),
            ..BenchConfig::default()
        };
        let mut prepared: Vec<_> = specs
            .iter()
            .map(|s| prepare(s, Path::new("."), &dbs()).unwrap())
            .collect();
        let fwd = run_suite("t", &prepared, &dbs(), &eng, None, &cfg).await;
        prepared.reverse();
        let rev = run_suite(
            "t",
            &prepared,
            &dbs(),
            &eng,
            None,
            &BenchConfig {
                concurrent: true,
                ..cfg.clone()
            },
        )
        .await;
        assert_eq!(fwd.overall, rev.overall);
        assert_eq!(fwd.overall.passed, 2);
        for q in &fwd.queries {
            assert_eq!(q.cost, Some(cost(&q.ledger, &cfg.prices).unwrap().total));
        }
        let total: f64 = fwd.queries.iter().filter_map(|q| q.cost).sum();
        assert!((fwd.cost.as_ref().unwrap().total - total).abs() < 1e-12);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = [
            spec("x", SELECT_ONLY, &[], 2),
            spec("x", "SELECT Nope FROM Restaurants", &[], 1),
            spec("x", SELECT_ONLY, &[], 4),
        ];
        for s in bad {
            assert!(matches!(
                prepare(&s, Path::new("."), &dbs()),
                Err(BenchError::InvalidSpec { .. })
            ));
        }
        let mut s = spec("x", SELECT_ONLY, &[], 1);
        s.database = "other".into();
        assert!(prepare(&s, Path::new("."), &dbs()).is_err());
    }

    fn fake(id: &str, bucket: Bucket, outcome: Outcome) -> QueryResult {
        QueryResult {
            id: id.into(),
            bucket,
            score: None,
            outcome,
            metrics: QueryMetrics::default(),
            calls: 0,
            input_tokens: 0,
            output_tokens: 0,
            cost: Some(0.0),
            wall_ms: 0,
            error: None,
            ledger: UsageLedger::default(),
        }
    }

    #[test]
    fn reports_are_stable_and_grouped() {
        let cfg = BenchConfig::default();
        let empty = build_report("empty", "mock", None, &cfg, vec![]);
        let v: serde_json::Value = serde_json::from_str(&report_json(&empty)).unwrap();
        assert_eq!(v["queries"].as_array().unwrap().len(), 0);
        assert_eq!(v["overall"]["total"], 0);

        let r = build_report(
            "s",
            "mock",
            None,
            &cfg,
            vec![
                fake("h1", Bucket::Hard, Outcome::Pass),
                fake("e1", Bucket::Easy, Outcome::Fail),
                fake("m1", Bucket::Medium, Outcome::Pass),
                fake("e2", Bucket::Easy, Outcome::Pass),
            ],
        );
        let csv = report_csv(&r);
        let ids: Vec<&str> = csv
            .lines()
            .skip(1)
            .map(|l| l.split(',').next().unwrap())
            .collect();
        assert_eq!(ids, ["e1", "e2", "m1", "h1"]);
        assert_eq!(r.by_bucket[&Bucket::Easy].passed, 1);

        let dir = tempfile::tempdir().unwrap();
        emit_report(&r, dir.path()).unwrap();
        let first = std::fs::read(dir.path().join(REPORT_JSON)).unwrap();
        emit_report(&r, dir.path()).unwrap();
        assert_eq!(std::fs::read(dir.path().join(REPORT_JSON)).unwrap(), first);
    }

    #[test]
    fn headline_accuracy_format() {
        let queries = (0..60)
            .map(|i| {
                fake(
                    &format!("q{i}"),
                    Bucket::Easy,
                    if i < 52 { Outcome::Pass } else { Outcome::Fail },
                )
            })
            .collect();
        let r = build_report("s", "mock", None, &BenchConfig::default(), queries);
        assert_eq!(r.overall.percent(), "86.67%");
        assert!(summary_table(&r).contains("86.67%"));
    }

    #[test]
    fn loads_suite_files() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("gt.csv"), "Name\nAlley Wok\n").unwrap();
        let body = serde_json::json!({
            "name": "demo",
            "queries": [{
                "id": "q1",
                "database": "food",
                "plan": SELECT_ONLY,
                "ground_truth": {"file": "gt.csv"},
                "annotations": {"lro_count": 1}
            }]
        });
        let path = dir.path().join("suite.json");
        std::fs::write(&path, body.to_string()).unwrap();
        let suite = Suite::load(&path).unwrap();
        assert_eq!(suite.name, "demo");
        let p = suite.prepare(&dbs()).unwrap();
        assert_eq!(p[0].truth.row_count(), 1);
        assert!(!p[0].order_sensitive);
        assert_eq!(single_kind(&p[0].plan), Some(LroKind::Select));
    }
}
