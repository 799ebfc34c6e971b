//! Scalability sweeps over input size and batch size with rule-checkable
//! ground truth.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use chrono::{Datelike, NaiveDate, NaiveDateTime};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use tokio::time::Instant;

use crate::gateway::{cost, ChatRequest, MockReply, MockScript, PriceTable, DEFAULT_TIMEOUT};
use crate::metrics::{exact_match_ratio, prf, Canon};
use crate::operators::{Engine, ImputeTarget, OperatorError, Requirement, Variant};
use crate::prompt::Candidate;
use crate::relation::{row_elements, take, Granularity, Relation};

/// The day the Berlin Wall fell; the select rule keeps strictly later dates.
pub const WALL_FALL: (i32, u32, u32) = (1989, 11, 9);

pub const SELECT_REQUIREMENT: &str = "The player was born after the fall of the Berlin Wall.";
pub const IMPUTE_REQUIREMENT: &str =
    "The Western zodiac sign of the player based on their date of birth.";
pub const ZODIAC_COLUMN: &str = "zodiac";

/// Western zodiac signs with their first day (month, day), in calendar order
/// starting from Capricorn's January tail.
const ZODIAC: [(&str, u32, u32); 12] = [
    ("Aquarius", 1, 20),
    ("Pisces", 2, 19),
    ("Aries", 3, 21),
    ("Taurus", 4, 20),
    ("Gemini", 5, 21),
    ("Cancer", 6, 21),
    ("Leo", 7, 23),
    ("Virgo", 8, 23),
    ("Libra", 9, 23),
    ("Scorpio", 10, 23),
    ("Sagittarius", 11, 22),
    ("Capricorn", 12, 22),
];

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum SweepError {
    #[error("invalid sweep configuration: {0}")]
    Config(String),
    #[error("relation has {rows} rows, the largest scale needs {needed}")]
    TooFewRows { rows: usize, needed: usize },
    #[error("relation has no `{0}` column")]
    MissingColumn(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepTask {
    SelectRow,
    ImputeColumn,
}

impl SweepTask {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::SelectRow => "select_row",
            Self::ImputeColumn => "impute_column",
        }
    }
}

impl fmt::Display for SweepTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepTask {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "select_row" => Ok(Self::SelectRow),
            "impute_column" => Ok(Self::ImputeColumn),
            other => Err(format!(
                "unknown sweep task `{other}` (select_row or impute_column)"
            )),
        }
    }
}

/// Rows per request: 1 is ONE, `All` is ALL, anything else is BATCH(b).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BatchSize {
    Rows(usize),
    All,
}

impl BatchSize {
    pub fn variant(self) -> Variant {
        match self {
            Self::Rows(1) => Variant::One,
            Self::Rows(b) => Variant::Batch(b),
            Self::All => Variant::All,
        }
    }
}

impl fmt::Display for BatchSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Rows(b) => write!(f, "{b}"),
            Self::All => f.write_str("all"),
        }
    }
}

impl FromStr for BatchSize {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "all" | "inf" | "∞" => Ok(Self::All),
            t => match t.parse::<usize>() {
                Ok(0) | Err(_) => Err(format!(
                    "batch size must be a positive integer or `all`, got `{s}`"
                )),
                Ok(b) => Ok(Self::Rows(b)),
            },
        }
    }
}

impl Serialize for BatchSize {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Self::Rows(b) => s.serialize_u64(*b as u64),
            Self::All => s.serialize_str("all"),
        }
    }
}

impl<'de> Deserialize<'de> for BatchSize {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(n) => n.to_string().parse(),
            Raw::S(s) => s.parse(),
        }
        .map_err(serde::de::Error::custom)
    }
}

mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_secs())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_secs(u64::deserialize(d)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub task: SweepTask,
    pub scales: Vec<usize>,
    pub batch_sizes: Vec<BatchSize>,
    pub repeats: usize,
    /// Per-run timeout in seconds.
    #[serde(rename = "timeout_secs", with = "duration_secs")]
    pub timeout: Duration,
    pub date_column: String,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            task: SweepTask::SelectRow,
            scales: vec![10, 100, 1000],
            batch_sizes: vec![BatchSize::Rows(1), BatchSize::Rows(50), BatchSize::All],
            repeats: 10,
            timeout: DEFAULT_TIMEOUT,
            date_column: "birthdate".into(),
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<(), SweepError> {
        let bad = |m: &str| Err(SweepError::Config(m.into()));
        if self.scales.is_empty() || self.scales.contains(&0) {
            return bad("scales must be a non-empty list of positive row counts");
        }
        if self.scales.windows(2).any(|w| w[0] >= w[1]) {
            return bad("scales must be strictly ascending");
        }
        if self.batch_sizes.is_empty() {
            return bad("batch_sizes must not be empty");
        }
        if self.repeats == 0 {
            return bad("repeats must be at least 1");
        }
        if self.timeout.is_zero() {
            return bad("timeout must be positive");
        }
        Ok(())
    }
}

/// Oracle answers; `None` marks a row whose date did not parse, which is
/// excluded from scoring.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Truth {
    Mask(Vec<Option<bool>>),
    Signs(Vec<Option<&'static str>>),
}

pub fn parse_date(s: &str) -> Option<NaiveDate> {
    let s = s.trim();
    NaiveDate::parse_from_str(s, "%Y-%m-%d").ok().or_else(|| {
        NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S")
            .ok()
            .map(|d| d.date())
    })
}

pub fn born_after_wall(d: NaiveDate) -> bool {
    let (y, m, day) = WALL_FALL;
    d > NaiveDate::from_ymd_opt(y, m, day).expect("valid date")
}

pub fn zodiac_sign(month: u32, day: u32) -> &'static str {
    ZODIAC
        .iter()
        .rev()
        .find(|&&(_, m, d)| (month, day) >= (m, d))
        .map_or("Capricorn", |&(sign, _, _)| sign)
}

pub fn rule_ground_truth(
    task: SweepTask,
    r: &Relation,
    date_column: &str,
) -> Result<Truth, SweepError> {
    let col = r
        .column_index(date_column)
        .map_err(|_| SweepError::MissingColumn(date_column.into()))?;
    let dates = r
        .column_values(col)
        .into_iter()
        .map(|v| v.and_then(parse_date));
    Ok(match task {
        SweepTask::SelectRow => Truth::Mask(dates.map(|d| d.map(born_after_wall)).collect()),
        SweepTask::ImputeColumn => Truth::Signs(
            dates
                .map(|d| d.map(|d| zodiac_sign(d.month(), d.day())))
                .collect(),
        ),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RunOutcome {
    Ok,
    Malformed,
    Timeout,
}

impl RunOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ok => "ok",
            Self::Malformed => "malformed",
            Self::Timeout => "timeout",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRecord {
    pub task: SweepTask,
    pub scale: usize,
    pub batch: BatchSize,
    pub repeat: usize,
    pub quality: f64,
    pub calls: usize,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub cost: Option<f64>,
    pub wall_ms: u64,
    pub outcome: RunOutcome,
}

impl SweepRecord {
    pub fn tokens_per_request(&self) -> f64 {
        if self.calls == 0 {
            0.0
        } else {
            self.input_tokens as f64 / self.calls as f64
        }
    }
}

/// Runs every (scale, batch, repeat) cell in order on the scale-prefix of
/// `r`. Failed runs are recorded with quality 0 and never stop the sweep.
/// Prompts that overflow the context are failures here rather than being
/// split, so ALL stays a single request.
pub async fn sweep(
    cfg: &SweepConfig,
    r: &Relation,
    engine: &Engine,
    prices: &PriceTable,
) -> Result<Vec<SweepRecord>, SweepError> {
    cfg.validate()?;
    let needed = *cfg.scales.last().expect("validated");
    if r.row_count() < needed {
        return Err(SweepError::TooFewRows {
            rows: r.row_count(),
            needed,
        });
    }
    let truth_all = rule_ground_truth(cfg.task, r, &cfg.date_column)?;
    let engine = engine.clone().with_overflow_fallback(false);
    let mut out = Vec::with_capacity(cfg.scales.len() * cfg.batch_sizes.len() * cfg.repeats);
    for &scale in &cfg.scales {
        let part = take(r, scale);
        for &batch in &cfg.batch_sizes {
            for repeat in 0..cfg.repeats {
                let run = engine.begin_query();
                let start = Instant::now();
                let result =
                    tokio::time::timeout(cfg.timeout, run_task(cfg, &part, &run, batch)).await;
                let wall_ms = start.elapsed().as_millis() as u64;
                let (outcome, quality) = match result {
                    Err(_) => (RunOutcome::Timeout, 0.0),
                    Ok(Err(e)) if e.is_timeout() => (RunOutcome::Timeout, 0.0),
                    Ok(Err(e)) => {
                        log::info!("{} scale {scale} batch {batch}: {e}", cfg.task);
                        (RunOutcome::Malformed, 0.0)
                    }
                    Ok(Ok(answer)) => (RunOutcome::Ok, score(&truth_all, &answer, scale)),
                };
                let ledger = run.gateway().ledger();
                out.push(SweepRecord {
                    task: cfg.task,
                    scale,
                    batch,
                    repeat,
                    quality,
                    calls: ledger.calls(),
                    input_tokens: ledger.input_tokens(),
                    output_tokens: ledger.output_tokens(),
                    cost: cost(&ledger, prices).ok().map(|c| c.total),
                    wall_ms,
                    outcome,
                });
            }
        }
    }
    Ok(out)
}

enum Answer {
    Mask(Vec<bool>),
    Values(Vec<String>),
}

async fn run_task(
    cfg: &SweepConfig,
    part: &Relation,
    engine: &Engine,
    batch: BatchSize,
) -> Result<Answer, OperatorError> {
    let variant = batch.variant();
    match cfg.task {
        SweepTask::SelectRow => {
            let l = Requirement::new(SELECT_REQUIREMENT)?;
            let candidates: Vec<Candidate<'_>> = row_elements(part)
                .into_iter()
                .enumerate()
                .map(|(i, e)| Candidate::new(i, e))
                .collect();
            Ok(Answer::Mask(
                engine
                    .select_mask(Granularity::Row, &candidates, &l, variant)
                    .await?,
            ))
        }
        SweepTask::ImputeColumn => {
            let l = Requirement::new(IMPUTE_REQUIREMENT)?;
            let out = engine
                .lro_impute(part, ImputeTarget::Column(ZODIAC_COLUMN), &l, Some(variant))
                .await?;
            let col = out.column_count() - 1;
            Ok(Answer::Values(
                out.column_values(col)
                    .into_iter()
                    .map(|v| v.unwrap_or_default().to_string())
                    .collect(),
            ))
        }
    }
}

fn score(truth: &Truth, answer: &Answer, scale: usize) -> f64 {
    match (truth, answer) {
        (Truth::Mask(t), Answer::Mask(p)) => {
            let (mut pred, mut gold) = (Vec::new(), Vec::new());
            for (i, (t, p)) in t[..scale].iter().zip(p).enumerate() {
                let Some(t) = t else { continue };
                if *p {
                    pred.push(i.to_string());
                }
                if *t {
                    gold.push(i.to_string());
                }
            }
            prf(&pred, &gold, Canon::default()).f1
        }
        (Truth::Signs(t), Answer::Values(p)) => {
            let (pred, gold): (Vec<&str>, Vec<&str>) = t[..scale]
                .iter()
                .zip(p)
                .filter_map(|(t, p)| t.map(|t| (p.as_str(), t)))
                .unzip();
            exact_match_ratio(&pred, &gold, Canon { case_fold: true }).unwrap_or(0.0)
        }
        _ => 0.0,
    }
}

/// One point of a quality-cost curve: all runs of a (batch, scale) cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub batch: BatchSize,
    pub scale: usize,
    pub runs: usize,
    pub failures: usize,
    pub tokens_per_request: f64,
    pub mean_quality: f64,
    pub min_quality: f64,
    pub max_quality: f64,
    pub total_cost: Option<f64>,
}

/// Aggregates records per (batch size, scale), ordered by batch size then
/// scale. Failed runs count as quality 0 in every statistic.
pub fn quality_cost_curve(records: &[SweepRecord]) -> Vec<CurvePoint> {
    let mut cells: BTreeMap<(BatchSize, usize), Vec<&SweepRecord>> = BTreeMap::new();
    for r in records {
        cells.entry((r.batch, r.scale)).or_default().push(r);
    }
    cells
        .into_iter()
        .map(|((batch, scale), rs)| {
            let n = rs.len() as f64;
            let q = rs.iter().map(|r| r.quality);
            let calls: usize = rs.iter().map(|r| r.calls).sum();
            let input: u64 = rs.iter().map(|r| r.input_tokens).sum();
            CurvePoint {
                batch,
                scale,
                runs: rs.len(),
                failures: rs.iter().filter(|r| r.outcome != RunOutcome::Ok).count(),
                tokens_per_request: if calls == 0 {
                    0.0
                } else {
                    input as f64 / calls as f64
                },
                mean_quality: q.clone().sum::<f64>() / n,
                min_quality: q.clone().fold(f64::INFINITY, f64::min),
                max_quality: q.fold(f64::NEG_INFINITY, f64::max),
                total_cost: rs.iter().map(|r| r.cost).sum(),
            }
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn records_csv(records: &[SweepRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "task",
        "scale",
        "batch",
        "repeat",
        "outcome",
        "quality",
        "calls",
        "input_tokens",
        "output_tokens",
        "tokens_per_request",
        "cost",
        "wall_ms",
    ])
    .expect("in-memory write");
    for r in records {
        w.write_record([
            r.task.to_string(),
            r.scale.to_string(),
            r.batch.to_string(),
            r.repeat.to_string(),
            r.outcome.as_str().to_string(),
            r.quality.to_string(),
            r.calls.to_string(),
            r.input_tokens.to_string(),
            r.output_tokens.to_string(),
            format!("{:.2}", r.tokens_per_request()),
            opt(r.cost),
            r.wall_ms.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("csv is utf-8")
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "batch",
        "scale",
        "runs",
        "failures",
        "tokens_per_request",
        "mean_quality",
        "min_quality",
        "max_quality",
        "total_cost",
    ])
    .expect("in-memory write");
    for p in points {
        w.write_record([
            p.batch.to_string(),
            p.scale.to_string(),
            p.runs.to_string(),
            p.failures.to_string(),
            format!("{:.2}", p.tokens_per_request),
            p.mean_quality.to_string(),
            p.min_quality.to_string(),
            p.max_quality.to_string(),
            opt(p.total_cost),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("csv is utf-8")
}

/// Deterministic player table with `name` and `birthdate` columns; dates are
/// spread over 1975 to 2004 so both sides of the wall rule occur.
pub fn synthetic_players(n: usize, seed: u64) -> Relation {
    let mut rng = StdRng::seed_from_u64(seed);
    let start = NaiveDate::from_ymd_opt(1975, 1, 1).expect("valid date");
    let rows = (0..n)
        .map(|i| {
            let d = start + chrono::Days::new(rng.random_range(0..365 * 30));
            vec![
                Some(format!("Player {i}")),
                Some(d.format("%Y-%m-%d").to_string()),
            ]
        })
        .collect();
    Relation::new("players", vec!["name".into(), "birthdate".into()], rows)
        .expect("two-column relation")
}

/// Values of `column` in each listed row of a prompt, in listing order.
fn listed_values<'a>(user: &'a str, column: &str) -> Vec<&'a str> {
    let needle = format!("{column}: ");
    user.match_indices(&needle)
        .map(|(i, _)| {
            let rest = &user[i + needle.len()..];
            let end = rest.find([';', '\n']).unwrap_or(rest.len());
            rest[..end].trim()
        })
        .collect()
}

fn oracle_reply(req: &ChatRequest, task: SweepTask, date_column: &str) -> Option<MockReply> {
    let dates: Vec<Option<NaiveDate>> = listed_values(&req.user, date_column)
        .into_iter()
        .map(parse_date)
        .collect();
    let one = req.tag.variant == "ONE";
    let body = match (task, req.tag.op.as_str()) {
        (SweepTask::SelectRow, "select") if one => {
            format!(
                "{{\"keep\": {}}}",
                dates
                    .first()
                    .copied()
                    .flatten()
                    .is_some_and(born_after_wall)
            )
        }
        (SweepTask::SelectRow, "select") => {
            let ids: Vec<usize> = (0..dates.len())
                .filter(|&i| dates[i].is_some_and(born_after_wall))
                .collect();
            format!("{{\"selected\": {ids:?}}}")
        }
        (SweepTask::ImputeColumn, "impute") => {
            let signs: Vec<&str> = dates
                .iter()
                .map(|d| d.map_or("", |d| zodiac_sign(d.month(), d.day())))
                .collect();
            if one {
                format!(
                    "{{\"value\": {}}}",
                    serde_json::to_string(signs.first().unwrap_or(&"")).expect("string")
                )
            } else {
                format!(
                    "{{\"values\": {}}}",
                    serde_json::to_string(&signs).expect("strings")
                )
            }
        }
        _ => return None,
    };
    Some(MockReply::Text(body))
}

/// Mock whose answers are computed from the oracle rule for every listed row.
pub fn oracle_script(task: SweepTask, date_column: &str) -> MockScript {
    let col = date_column.to_string();
    MockScript::new().rule(move |req| oracle_reply(req, task, &col))
}

/// Oracle mock that answers with unusable text once a prompt exceeds
/// `threshold` estimated tokens.
pub fn threshold_fault_script(task: SweepTask, date_column: &str, threshold: usize) -> MockScript {
    let col = date_column.to_string();
    MockScript::new().rule(move |req| {
        if req.estimated_tokens() > threshold {
            Some(MockReply::Text("I lost track of the rows, sorry.".into()))
        } else {
            oracle_reply(req, task, &col)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::BackendConfig;
    use crate::operators::testkit::{engine, engine_with};
    use proptest::prelude::*;

    #[test]
    fn wall_rule_is_strict() {
        assert!(born_after_wall(parse_date("1990-01-01").unwrap()));
        assert!(!born_after_wall(parse_date("1989-11-09").unwrap()));
        assert!(born_after_wall(parse_date("1989-11-10 00:00:00").unwrap()));
        assert_eq!(parse_date("11/10/1989"), None);
    }

    #[test]
    fn zodiac_boundaries() {
        assert_eq!(zodiac_sign(3, 21), "Aries");
        assert_eq!(zodiac_sign(3, 20), "Pisces");
        assert_eq!(zodiac_sign(4, 19), "Aries");
        assert_eq!(zodiac_sign(2, 19), "Pisces");
        assert_eq!(zodiac_sign(1, 19), "Capricorn");
        assert_eq!(zodiac_sign(12, 22), "Capricorn");
        assert_eq!(zodiac_sign(12, 21), "Sagittarius");
        assert_eq!(zodiac_sign(1, 20), "Aquarius");
    }

    /// Independent table of (sign, first day, last day) spans.
    fn sign_by_span(month: u32, day: u32) -> &'static str {
        let spans = [
            ("Aries", (3, 21), (4, 19)),
            ("Taurus", (4, 20), (5, 20)),
            ("Gemini", (5, 21), (6, 20)),
            ("Cancer", (6, 21), (7, 22)),
            ("Leo", (7, 23), (8, 22)),
            ("Virgo", (8, 23), (9, 22)),
            ("Libra", (9, 23), (10, 22)),
            ("Scorpio", (10, 23), (11, 21)),
            ("Sagittarius", (11, 22), (12, 21)),
            ("Aquarius", (1, 20), (2, 18)),
            ("Pisces", (2, 19), (3, 20)),
        ];
        spans
            .iter()
            .find(|(_, a, b)| (month, day) >= *a && (month, day) <= *b)
            .map_or("Capricorn", |(s, _, _)| s)
    }

    #[test]
    fn zodiac_partitions_the_year() {
        let mut day = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap();
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        while day.year() == 2024 {
            let s = zodiac_sign(day.month(), day.day());
            assert_eq!(s, sign_by_span(day.month(), day.day()), "{day}");
            *counts.entry(s).or_default() += 1;
            day = day.succ_opt().unwrap();
        }
        assert_eq!(counts.len(), 12);
        assert_eq!(counts.values().sum::<usize>(), 366);
    }

    #[test]
    fn truth_flags_unparseable_dates() {
        let r = Relation::from_strs(
            "p",
            &["name", "birthdate"],
            &[&["a", "1990-05-01"], &["b", "unknown"]],
        )
        .unwrap();
        assert_eq!(
            rule_ground_truth(SweepTask::SelectRow, &r, "birthdate").unwrap(),
            Truth::Mask(vec![Some(true), None])
        );
        assert_eq!(
            rule_ground_truth(SweepTask::ImputeColumn, &r, "birthdate").unwrap(),
            Truth::Signs(vec![Some("Taurus"), None])
        );
        assert_eq!(
            rule_ground_truth(SweepTask::SelectRow, &r, "dob"),
            Err(SweepError::MissingColumn("dob".into()))
        );
    }

    #[test]
    fn batch_sizes_parse() {
        assert_eq!("1".parse::<BatchSize>().unwrap().variant(), Variant::One);
        assert_eq!(
            "50".parse::<BatchSize>().unwrap().variant(),
            Variant::Batch(50)
        );
        assert_eq!("all".parse::<BatchSize>().unwrap().variant(), Variant::All);
        assert!("0".parse::<BatchSize>().is_err());
        let cfg: SweepConfig =
            serde_json::from_str(r#"{"batch_sizes": [1, "all", 20], "repeats": 2}"#).unwrap();
        assert_eq!(
            cfg.batch_sizes,
            [BatchSize::Rows(1), BatchSize::All, BatchSize::Rows(20)]
        );
        assert_eq!(cfg.timeout, DEFAULT_TIMEOUT);
    }

    #[test]
    fn config_validation() {
        let ok = SweepConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            SweepConfig {
                scales: vec![100, 10],
                ..ok.clone()
            },
            SweepConfig {
                repeats: 0,
                ..ok.clone()
            },
            SweepConfig {
                batch_sizes: vec![],
                ..ok.clone()
            },
            SweepConfig {
                scales: vec![],
                ..ok.clone()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    fn small(task: SweepTask) -> SweepConfig {
        SweepConfig {
            task,
            scales: vec![5, 40],
            batch_sizes: vec![BatchSize::Rows(1), BatchSize::Rows(8), BatchSize::All],
            repeats: 2,
            ..SweepConfig::default()
        }
    }

    #[tokio::test(start_paused = true)]
    async fn oracle_mock_scores_perfectly() {
        let players = synthetic_players(40, 7);
        for task in [SweepTask::SelectRow, SweepTask::ImputeColumn] {
            let (eng, _) = engine(oracle_script(task, "birthdate"));
            let recs = sweep(&small(task), &players, &eng, &PriceTable::new())
                .await
                .unwrap();
            assert_eq!(recs.len(), 2 * 3 * 2);
            for r in &recs {
                assert_eq!(
                    (r.outcome, r.quality),
                    (RunOutcome::Ok, 1.0),
                    "{task} {r:?}"
                );
            }
            let one = recs
                .iter()
                .find(|r| r.scale == 40 && r.batch == BatchSize::Rows(1))
                .unwrap();
            assert_eq!(one.calls, 40);
            let b8 = recs
                .iter()
                .find(|r| r.scale == 40 && r.batch == BatchSize::Rows(8))
                .unwrap();
            assert_eq!(b8.calls, 5);
        }
    }

    #[tokio::test(start_paused = true)]
    async fn token_threshold_breaks_only_large_prompts() {
        let players = synthetic_players(400, 3);
        let cfg = SweepConfig {
            scales: vec![20, 400],
            batch_sizes: vec![BatchSize::Rows(50), BatchSize::All],
            repeats: 1,
            ..SweepConfig::default()
        };
        let (eng, _) = engine(threshold_fault_script(
            SweepTask::SelectRow,
            "birthdate",
            2000,
        ));
        let recs = sweep(&cfg, &players, &eng, &PriceTable::new())
            .await
            .unwrap();
        let q = |scale, batch| {
            recs.iter()
                .find(|r| r.scale == scale && r.batch == batch)
                .unwrap()
        };
        assert_eq!(q(20, BatchSize::All).quality, 1.0);
        assert_eq!(q(400, BatchSize::Rows(50)).quality, 1.0);
        let all = q(400, BatchSize::All);
        assert_eq!((all.outcome, all.quality), (RunOutcome::Malformed, 0.0));
        assert!(all.tokens_per_request() > 2000.0);
    }

    #[tokio::test(start_paused = true)]
    async fn slow_runs_time_out_without_stopping_the_sweep() {
        let script = oracle_script(SweepTask::SelectRow, "birthdate").latency(|req, _| {
            if req.tag.variant == "ALL" {
                Duration::from_secs(120)
            } else {
                Duration::from_millis(5)
            }
        });
        let (eng, _) = engine_with(script, BackendConfig::default());
        let cfg = SweepConfig {
            scales: vec![10],
            batch_sizes: vec![BatchSize::All, BatchSize::Rows(1)],
            repeats: 1,
            timeout: Duration::from_secs(60),
            ..SweepConfig::default()
        };
        let recs = sweep(&cfg, &synthetic_players(10, 1), &eng, &PriceTable::new())
            .await
            .unwrap();
        assert_eq!(recs[0].outcome, RunOutcome::Timeout);
        assert_eq!(recs[1].outcome, RunOutcome::Ok);
    }

    #[tokio::test(start_paused = true)]
    async fn records_match_the_gateway_ledger() {
        let (eng, _) = engine(oracle_script(SweepTask::SelectRow, "birthdate"));
        let cfg = SweepConfig {
            scales: vec![12],
            batch_sizes: vec![BatchSize::Rows(5)],
            repeats: 1,
            ..SweepConfig::default()
        };
        let players = synthetic_players(12, 9);
        let recs = sweep(&cfg, &players, &eng, &PriceTable::new())
            .await
            .unwrap();
        let q = eng.begin_query();
        let cands: Vec<Candidate<'_>> = row_elements(&players)
            .into_iter()
            .enumerate()
            .map(|(i, e)| Candidate::new(i, e))
            .collect();
        q.select_mask(
            Granularity::Row,
            &cands,
            &Requirement::new(SELECT_REQUIREMENT).unwrap(),
            Variant::Batch(5),
        )
        .await
        .unwrap();
        let l = q.gateway().ledger();
        assert_eq!(
            (recs[0].calls, recs[0].input_tokens, recs[0].output_tokens),
            (l.calls(), l.input_tokens(), l.output_tokens())
        );
    }

    fn rec(batch: BatchSize, quality: f64, outcome: RunOutcome) -> SweepRecord {
        SweepRecord {
            task: SweepTask::SelectRow,
            scale: 10,
            batch,
            repeat: 0,
            quality,
            calls: 2,
            input_tokens: 100,
            output_tokens: 10,
            cost: Some(0.5),
            wall_ms: 0,
            outcome,
        }
    }

    #[test]
    fn curve_statistics() {
        let p = quality_cost_curve(&[rec(BatchSize::All, 0.7, RunOutcome::Ok)]);
        assert_eq!(
            (p[0].min_quality, p[0].mean_quality, p[0].max_quality),
            (0.7, 0.7, 0.7)
        );
        let p = quality_cost_curve(&vec![rec(BatchSize::Rows(5), 1.0, RunOutcome::Ok); 10]);
        assert_eq!(p[0].max_quality - p[0].min_quality, 0.0);
        assert_eq!(p[0].total_cost, Some(5.0));
        assert_eq!(p[0].tokens_per_request, 50.0);
        let p = quality_cost_curve(&[
            rec(BatchSize::All, 1.0, RunOutcome::Ok),
            rec(BatchSize::All, 0.0, RunOutcome::Malformed),
            rec(BatchSize::Rows(1), 1.0, RunOutcome::Ok),
        ]);
        assert_eq!(p[0].batch, BatchSize::Rows(1));
        assert_eq!((p[1].mean_quality, p[1].failures), (0.5, 1));
        assert!(curve_csv(&p).starts_with("batch,scale,runs"));
        assert_eq!(
            records_csv(&[rec(BatchSize::All, 1.0, RunOutcome::Ok)])
                .lines()
                .count(),
            2
        );
    }

    proptest! {
        #[test]
        fn curve_mean_lies_between_min_and_max(qs in prop::collection::vec(0.0f64..=1.0, 1..20)) {
            let recs: Vec<_> = qs.iter().map(|&q| rec(BatchSize::Rows(3), q, RunOutcome::Ok)).collect();
            let p = &quality_cost_curve(&recs)[0];
            prop_assert!(p.min_quality <= p.mean_quality + 1e-12 && p.mean_quality <= p.max_quality + 1e-12);
            prop_assert_eq!(p.runs, qs.len());
        }
    }
}
