mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lro_core::operators::{LroKind, Variant};
use lro_core::relation::Granularity;
use lro_core::scale_lab::{BatchSize, SweepTask};

/// LLM-enhanced relational operators from the command line.
///
/// Exit codes: 0 success, 1 domain error (bad input data, plan or suite),
/// 2 usage error, 3 backend failure or timeout.
#[derive(Debug, Parser)]
#[command(name = "lro", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML file with backend, prices, templates, prompt, thresholds and sweep sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// JSON mock script; no network traffic happens when set.
    #[arg(long, global = true)]
    pub mock: Option<PathBuf>,
    /// OpenAI-compatible chat completions URL.
    #[arg(long, global = true)]
    pub endpoint: Option<String>,
    /// Model name sent to the backend.
    #[arg(long, global = true)]
    pub model: Option<String>,
    /// Sampling temperature.
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
    /// Context window in tokens.
    #[arg(long, global = true)]
    pub max_context: Option<usize>,
    /// Maximum concurrent requests.
    #[arg(long, global = true)]
    pub parallelism: Option<usize>,
    /// Per-query timeout in seconds.
    #[arg(long, global = true)]
    pub timeout_secs: Option<u64>,
    /// Extra attempts after a transport failure.
    #[arg(long, global = true)]
    pub retries: Option<u32>,
    /// Directory of `<template>.txt` overrides.
    #[arg(long, global = true)]
    pub templates: Option<PathBuf>,
    /// Ask for step-by-step reasoning before the answer.
    #[arg(long, global = true)]
    pub cot: bool,
    /// Include sample values or tuples in prompts.
    #[arg(long, global = true)]
    pub examples: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a single operator over input relations.
    Op(OpArgs),
    /// Parse and execute a plan file against a database directory.
    Plan(PlanArgs),
    /// Run a benchmark suite and write report files.
    Bench(BenchArgs),
    /// Sweep input scale and batch size and write quality-cost data.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct OpArgs {
    /// select, match, impute, cluster or order.
    pub operator: LroKind,
    /// cell, row, column or table.
    #[arg(short, long)]
    pub granularity: Granularity,
    /// ALL, ONE, SEMI, PAIR, SORT, SCORE or BATCH(b); defaults to the best practice.
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Input relation file (CSV or JSON); match takes two.
    #[arg(short, long = "input")]
    pub inputs: Vec<PathBuf>,
    /// Directory of relations, used as the database for table granularity.
    #[arg(long)]
    pub db: Option<PathBuf>,
    /// Natural-language requirement.
    #[arg(short = 'l', long)]
    pub requirement: String,
    /// Join-key columns for cell-wise match, as `LEFT,RIGHT`.
    #[arg(long)]
    pub keys: Option<String>,
    /// New column name for column-wise impute.
    #[arg(long)]
    pub column: Option<String>,
    /// Number of rows for row-wise impute.
    #[arg(long)]
    pub rows: Option<usize>,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    /// Write the result here instead of stdout.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OutFormat::Csv)]
    pub format: OutFormat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum OutFormat {
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    pub plan: PathBuf,
    /// Directory whose CSV/JSON files form the database.
    #[arg(long)]
    pub db: PathBuf,
    /// Write the per-node execution trace as JSON.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Suite JSON file.
    pub suite: PathBuf,
    /// Directory with one sub-directory of relations per database.
    #[arg(long)]
    pub databases: PathBuf,
    /// Directory for report.json and queries.csv.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub easy_max: Option<u8>,
    #[arg(long)]
    pub medium_max: Option<u8>,
    /// Run queries concurrently, each with its own ledger.
    #[arg(long)]
    pub concurrent: bool,
    /// Mock script for the judge model used by open-ended single-operator queries.
    #[arg(long)]
    pub judge_mock: Option<PathBuf>,
    /// Live judge model name.
    #[arg(long)]
    pub judge_model: Option<String>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Relation with a date column; omit to use generated players.
    #[arg(short, long)]
    pub input: Option<PathBuf>,
    /// Row count of the generated player table.
    #[arg(long, default_value_t = 1000)]
    pub synthetic: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub task: Option<SweepTask>,
    /// Comma-separated ascending row counts.
    #[arg(long, value_delimiter = ',')]
    pub scales: Option<Vec<usize>>,
    /// Comma-separated batch sizes; 1 is ONE and `all` is ALL.
    #[arg(long, value_delimiter = ',')]
    pub batch_sizes: Option<Vec<BatchSize>>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub date_column: Option<String>,
    /// Answer from the rule oracle instead of a model.
    #[arg(long, conflicts_with = "fault_threshold")]
    pub oracle: bool,
    /// Answer from the rule oracle but fail prompts above this many tokens.
    #[arg(long)]
    pub fault_threshold: Option<usize>,
    /// CSV file for one row per run.
    #[arg(long)]
    pub records: PathBuf,
    /// CSV file for the aggregated quality-cost curve.
    #[arg(long)]
    pub curve: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { run::EXIT_USAGE } else { 0 });
        }
    };
    match run::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            ExitCode::from(e.code)
        }
    }
}
