use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use lro_core::bench::{emit_report, run_suite, summary_table, BenchConfig, Suite, Thresholds};
use lro_core::gateway::{
    cost, BackendConfig, ChatBackend, Gateway, MockBackend, MockScript, MockScriptFile,
    OpenAiBackend, UsageLedger,
};
use lro_core::metrics::Canon;
use lro_core::operators::{Engine, LroKind, OperatorError};
use lro_core::plan::{execute, parse_plan_checked, ExecError, ImputeSpec, Plan, PlanNode};
use lro_core::prompt::PromptKit;
use lro_core::relation::{
    load_relation, write_relation, Database, Format, Granularity, LoadOptions, Relation,
};
use lro_core::scale_lab::{
    curve_csv, oracle_script, quality_cost_curve, records_csv, sweep, synthetic_players,
    threshold_fault_script, SweepConfig, SweepError,
};

use crate::config::{resolve_backend, BackendFlags, BackendSection, FileConfig, DEFAULT_KEY_VAR};
use crate::{
    BenchArgs, Cli, Command, GlobalArgs, OpArgs, OutFormat, OutputArgs, PlanArgs, SweepArgs,
};

pub const EXIT_DOMAIN: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_BACKEND: u8 = 3;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        error: e.into(),
    }
}

fn domain(e: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: EXIT_DOMAIN,
        error: e.into(),
    }
}

fn operator_failure(e: OperatorError, context: String) -> Failure {
    let code = match &e {
        OperatorError::Gateway(_) => EXIT_BACKEND,
        OperatorError::UnsupportedGranularity { .. } | OperatorError::UnsupportedVariant { .. } => {
            EXIT_USAGE
        }
        _ => EXIT_DOMAIN,
    };
    Failure {
        code,
        error: anyhow::Error::new(e).context(context),
    }
}

fn exec_failure(e: ExecError) -> Failure {
    let ExecError {
        node,
        source,
        ledger,
    } = e;
    eprintln!("{}", ledger_line(&ledger, None));
    operator_failure(source, format!("node {node}"))
}

pub fn dispatch(cli: Cli) -> Result<(), Failure> {
    let file = match &cli.global.config {
        Some(p) => FileConfig::load(p).map_err(usage)?,
        None => FileConfig::default(),
    };
    let scripted = cli.global.mock.is_some()
        || matches!(&cli.command, Command::Sweep(s) if s.oracle || s.fault_threshold.is_some());
    let rt = if scripted {
        tokio::runtime::Builder::new_current_thread()
            .enable_time()
            .start_paused(true)
            .build()
    } else {
        tokio::runtime::Builder::new_multi_thread()
            .enable_all()
            .build()
    }
    .map_err(domain)?;
    rt.block_on(async {
        match &cli.command {
            Command::Op(a) => run_op(&cli.global, &file, a).await,
            Command::Plan(a) => run_plan(&cli.global, &file, a).await,
            Command::Bench(a) => run_bench(&cli.global, &file, a).await,
            Command::Sweep(a) => run_sweep(&cli.global, &file, a).await,
        }
    })
}

fn backend_flags(g: &GlobalArgs) -> BackendFlags {
    BackendFlags {
        endpoint: g.endpoint.clone(),
        model: g.model.clone(),
        temperature: g.temperature,
        max_context_tokens: g.max_context,
        parallelism: g.parallelism,
        timeout_secs: g.timeout_secs,
        retries: g.retries,
    }
}

pub fn load_mock(path: &Path) -> Result<MockScript, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading mock script {}", path.display()))
        .map_err(domain)?;
    let file: MockScriptFile = serde_json::from_str(&text)
        .with_context(|| format!("parsing mock script {}", path.display()))
        .map_err(usage)?;
    Ok(file.into())
}

/// Builds an engine from a mock script when given, otherwise from the live
/// backend configured by flags or the named file section.
fn build_engine(
    g: &GlobalArgs,
    file: &FileConfig,
    section: Option<&BackendSection>,
    flags: &BackendFlags,
    script: Option<MockScript>,
) -> Result<Engine, Failure> {
    let cfg: BackendConfig = resolve_backend(section, flags);
    let backend: Arc<dyn ChatBackend> = match script {
        Some(s) => Arc::new(MockBackend::new(s)),
        None => {
            if section.is_none() && flags.is_empty() {
                return Err(usage(anyhow!(
                    "no backend configured: pass --mock, --model, or a [backend] section in --config"
                )));
            }
            let key_var = section
                .and_then(|s| s.api_key_env.as_deref())
                .unwrap_or(DEFAULT_KEY_VAR);
            Arc::new(OpenAiBackend::from_env(cfg.model.clone(), key_var))
        }
    };
    let gateway = Gateway::new(backend, cfg).map_err(usage)?;
    let kit = match g.templates.as_ref().or(file.templates.dir.as_ref()) {
        Some(dir) => PromptKit::from_dir(dir).map_err(usage)?,
        None => PromptKit::default(),
    };
    let mut options = file.prompt.clone();
    options.cot |= g.cot;
    options.examples |= g.examples;
    options.validate().map_err(usage)?;
    Ok(Engine::new(gateway, kit).with_options(options))
}

fn main_engine(
    g: &GlobalArgs,
    file: &FileConfig,
    script: Option<MockScript>,
) -> Result<Engine, Failure> {
    let script = match (script, &g.mock) {
        (Some(s), _) => Some(s),
        (None, Some(p)) => Some(load_mock(p)?),
        (None, None) => None,
    };
    build_engine(g, file, file.backend.as_ref(), &backend_flags(g), script)
}

fn ledger_line(ledger: &UsageLedger, prices: Option<&FileConfig>) -> String {
    let priced = prices.map(|f| cost(ledger, &f.prices));
    let dollars = match priced {
        Some(Ok(c)) => format!("${:.6}", c.total),
        Some(Err(e)) => format!("n/a ({e})"),
        None => "n/a".into(),
    };
    format!(
        "calls: {}, input tokens: {}, output tokens: {}, cost: {dollars}",
        ledger.calls(),
        ledger.input_tokens(),
        ledger.output_tokens()
    )
}

fn emit_relation(r: &Relation, out: &OutputArgs) -> Result<(), Failure> {
    let format = match out.format {
        OutFormat::Csv => Format::Csv,
        OutFormat::Json => Format::Json,
    };
    match &out.output {
        Some(p) => write_relation(p, r, format).map_err(domain),
        None => {
            match format {
                Format::Csv => print!("{}", r.to_csv_string()),
                Format::Json => println!("{}", r.to_json_string()),
            }
            Ok(())
        }
    }
}

fn load_inputs(a: &OpArgs) -> Result<(Database, Vec<String>), Failure> {
    let opts = LoadOptions::default();
    let mut rels = match &a.db {
        Some(dir) => Database::load_dir(dir, &opts)
            .map_err(domain)?
            .relations()
            .to_vec(),
        None => Vec::new(),
    };
    let mut named = Vec::new();
    for p in &a.inputs {
        let r = load_relation(p, None, &opts).map_err(domain)?;
        named.push(r.name().to_string());
        rels.push(r);
    }
    Ok((Database::new(rels).map_err(domain)?, named))
}

fn op_node(a: &OpArgs, named: &[String]) -> Result<PlanNode, Failure> {
    let (kind, g) = (a.operator, a.granularity);
    if !kind.supports(g) {
        return Err(usage(anyhow!("{kind} is not defined at {g} granularity")));
    }
    if let Some(v) = a.variant {
        if !v.valid_for(kind, g) {
            return Err(usage(anyhow!(
                "{v} is not an implementation of {kind} at {g} granularity"
            )));
        }
    }
    let first = || {
        named
            .first()
            .cloned()
            .ok_or_else(|| usage(anyhow!("{kind} at {g} granularity needs --input")))
    };
    let input = if g == Granularity::Table {
        Box::new(PlanNode::ScanDatabase)
    } else {
        Box::new(PlanNode::Scan(first()?))
    };
    let (requirement, variant) = (a.requirement.clone(), a.variant);
    Ok(match kind {
        LroKind::Select => PlanNode::LroSelect {
            input,
            g,
            requirement,
            variant,
        },
        LroKind::Cluster => PlanNode::LroCluster {
            input,
            g,
            requirement,
            variant,
        },
        LroKind::Order => PlanNode::LroOrder {
            input,
            requirement,
            variant,
        },
        LroKind::Impute => {
            let target = match g {
                Granularity::Cell => ImputeSpec::Cells,
                Granularity::Column => ImputeSpec::Column(
                    a.column
                        .clone()
                        .ok_or_else(|| usage(anyhow!("column-wise impute needs --column")))?,
                ),
                _ => ImputeSpec::Rows(
                    a.rows
                        .ok_or_else(|| usage(anyhow!("row-wise impute needs --rows")))?,
                ),
            };
            PlanNode::LroImpute {
                input,
                target,
                requirement,
                variant,
            }
        }
        LroKind::Match => {
            let other = named
                .get(1)
                .cloned()
                .ok_or_else(|| usage(anyhow!("match needs two --input relations")))?;
            let keys = match (&a.keys, g) {
                (Some(k), _) => {
                    let (l, r) = k
                        .split_once(',')
                        .ok_or_else(|| usage(anyhow!("--keys takes LEFT,RIGHT")))?;
                    Some((l.trim().to_string(), r.trim().to_string()))
                }
                (None, Granularity::Cell) => {
                    return Err(usage(anyhow!("cell-wise match needs --keys LEFT,RIGHT")))
                }
                (None, _) => None,
            };
            PlanNode::LroMatchJoin {
                input,
                other,
                g,
                keys,
                requirement,
                variant,
            }
        }
    })
}

async fn run_op(g: &GlobalArgs, file: &FileConfig, a: &OpArgs) -> Result<(), Failure> {
    if a.requirement.trim().is_empty() {
        return Err(usage(anyhow!("requirement text is empty")));
    }
    let (db, named) = load_inputs(a)?;
    let plan = Plan::new(op_node(a, &named)?).map_err(usage)?;
    let engine = main_engine(g, file, None)?;
    let exec = execute(&plan, &db, &engine).await.map_err(exec_failure)?;
    emit_relation(&exec.output, &a.out)?;
    eprintln!("{}", ledger_line(&exec.ledger, Some(file)));
    Ok(())
}

async fn run_plan(g: &GlobalArgs, file: &FileConfig, a: &PlanArgs) -> Result<(), Failure> {
    let text = fs::read_to_string(&a.plan)
        .with_context(|| format!("reading plan {}", a.plan.display()))
        .map_err(domain)?;
    let db = Database::load_dir(&a.db, &LoadOptions::default()).map_err(domain)?;
    let plan = parse_plan_checked(&text, &db)
        .with_context(|| format!("in {}", a.plan.display()))
        .map_err(domain)?;
    let engine = main_engine(g, file, None)?;
    let exec = execute(&plan, &db, &engine).await.map_err(exec_failure)?;
    emit_relation(&exec.output, &a.out)?;
    if let Some(p) = &a.trace {
        let json = serde_json::to_string_pretty(&exec.trace).map_err(domain)?;
        fs::write(p, json + "\n")
            .with_context(|| format!("writing {}", p.display()))
            .map_err(domain)?;
    }
    eprintln!("{}", ledger_line(&exec.ledger, Some(file)));
    Ok(())
}

fn load_databases(dir: &Path) -> Result<BTreeMap<String, Database>, Failure> {
    let entries = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))
        .map_err(domain)?;
    let mut dbs = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(domain)?.path();
        if path.is_dir() {
            let name = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            dbs.insert(
                name,
                Database::load_dir(&path, &LoadOptions::default()).map_err(domain)?,
            );
        }
    }
    Ok(dbs)
}

async fn run_bench(g: &GlobalArgs, file: &FileConfig, a: &BenchArgs) -> Result<(), Failure> {
    let thresholds = Thresholds {
        easy_max: a.easy_max.unwrap_or(file.thresholds.easy_max),
        medium_max: a.medium_max.unwrap_or(file.thresholds.medium_max),
    };
    thresholds.validate().map_err(|e| usage(anyhow!(e)))?;
    let suite = Suite::load(&a.suite).map_err(domain)?;
    let dbs = load_databases(&a.databases)?;
    let specs = suite.prepare(&dbs).map_err(domain)?;
    let engine = main_engine(g, file, None)?;
    let judge = match (&a.judge_mock, &a.judge_model) {
        (Some(p), _) => Some(build_engine(
            g,
            file,
            None,
            &BackendFlags::default(),
            Some(load_mock(p)?),
        )?),
        (None, Some(m)) => {
            let flags = BackendFlags {
                model: Some(m.clone()),
                ..BackendFlags::default()
            };
            let section = file.judge.as_ref().or(file.backend.as_ref());
            Some(build_engine(g, file, section, &flags, None)?)
        }
        (None, None) => None,
    };
    let cfg = BenchConfig {
        thresholds,
        prices: file.prices.clone(),
        canon: Canon::default(),
        concurrent: a.concurrent,
    };
    let report = run_suite(&suite.name, &specs, &dbs, &engine, judge.as_ref(), &cfg).await;
    emit_report(&report, &a.out).map_err(domain)?;
    print!("{}", summary_table(&report));
    Ok(())
}

async fn run_sweep(g: &GlobalArgs, file: &FileConfig, a: &SweepArgs) -> Result<(), Failure> {
    let base = &file.sweep;
    let cfg = SweepConfig {
        task: a.task.unwrap_or(base.task),
        scales: a.scales.clone().unwrap_or_else(|| base.scales.clone()),
        batch_sizes: a
            .batch_sizes
            .clone()
            .unwrap_or_else(|| base.batch_sizes.clone()),
        repeats: a.repeats.unwrap_or(base.repeats),
        timeout: g
            .timeout_secs
            .map(std::time::Duration::from_secs)
            .unwrap_or(base.timeout),
        date_column: a
            .date_column
            .clone()
            .unwrap_or_else(|| base.date_column.clone()),
    };
    cfg.validate().map_err(usage)?;
    let r = match &a.input {
        Some(p) => load_relation(p, None, &LoadOptions::default()).map_err(domain)?,
        None => synthetic_players(a.synthetic, a.seed),
    };
    let script = if a.oracle {
        Some(oracle_script(cfg.task, &cfg.date_column))
    } else {
        a.fault_threshold
            .map(|t| threshold_fault_script(cfg.task, &cfg.date_column, t))
    };
    let engine = main_engine(g, file, script)?;
    let records = sweep(&cfg, &r, &engine, &file.prices)
        .await
        .map_err(|e| match e {
            SweepError::Config(_) => usage(e),
            _ => domain(e),
        })?;
    let write = |p: &Path, text: String| {
        fs::write(p, text)
            .with_context(|| format!("writing {}", p.display()))
            .map_err(domain)
    };
    write(&a.records, records_csv(&records))?;
    let curve = curve_csv(&quality_cost_curve(&records));
    if let Some(p) = &a.curve {
        write(p, curve.clone())?;
    }
    print!("{curve}");
    Ok(())
}
