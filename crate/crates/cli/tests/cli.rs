use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn fx(rel: &str) -> String {
    fixtures().join(rel).display().to_string()
}

fn lro(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lro"))
        .args(args)
        .env("RUST_LOG", "off")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

#[test]
fn op_select_column_returns_description() {
    let o = lro(&[
        "--mock",
        &fx("mocks/example_4_1.json"),
        "op",
        "select",
        "-g",
        "column",
        "--variant",
        "ALL",
        "-i",
        &fx("restaurants/Restaurants.csv"),
        "-l",
        "It is related to the restaurant atmosphere.",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().next(), Some("Description"));
    assert_eq!(stdout(&o).lines().count(), 6);
    assert!(stderr(&o).contains("calls: 1"));
}

#[test]
fn op_writes_json_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out.json");
    let o = lro(&[
        "--mock",
        &fx("mocks/example_4_1.json"),
        "op",
        "select",
        "-g",
        "column",
        "-i",
        &fx("restaurants/Restaurants.csv"),
        "-l",
        "atmosphere",
        "-o",
        out.to_str().unwrap(),
        "--format",
        "json",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(out).unwrap()).unwrap();
    assert!(v.to_string().contains("Cozy and lively"));
}

#[test]
fn undefined_granularity_is_a_usage_error() {
    let o = lro(&[
        "--mock",
        &fx("mocks/example_4_1.json"),
        "op",
        "order",
        "-g",
        "cell",
        "-i",
        &fx("restaurants/Restaurants.csv"),
        "-l",
        "x",
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = lro(&[
        "op",
        "select",
        "-g",
        "cell",
        "-l",
        "x",
        "--mock",
        &fx("mocks/example_4_1.json"),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = lro(&["op", "frobnicate", "-g", "row", "-l", "x"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_input_is_a_domain_error() {
    let o = lro(&[
        "--mock",
        &fx("mocks/example_4_1.json"),
        "op",
        "select",
        "-g",
        "row",
        "-i",
        "/no/such.csv",
        "-l",
        "x",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/no/such.csv"));
}

#[test]
fn no_backend_means_no_network() {
    let o = lro(&[
        "op",
        "select",
        "-g",
        "row",
        "-i",
        &fx("restaurants/Restaurants.csv"),
        "-l",
        "x",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no backend configured"));
}

#[test]
fn plan_example_returns_alley_wok_with_trace() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.json");
    let o = lro(&[
        "--mock",
        &fx("mocks/example_4_2.json"),
        "plan",
        &fx("plans/example_4_2.sql"),
        "--db",
        &fx("restaurants"),
        "--trace",
        trace.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o), "Name\nAlley Wok\n");
    let t: Value = serde_json::from_str(&std::fs::read_to_string(trace).unwrap()).unwrap();
    let nodes: Vec<&str> = t
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["node"].as_str().unwrap())
        .collect();
    assert_eq!(
        nodes,
        [
            "Scan(Restaurants)",
            "LroSelect(row)",
            "LroOrder(row)",
            "Project(Name)",
            "Limit(1)"
        ]
    );
    assert_eq!(t[1]["calls"], 5);
}

#[test]
fn invalid_plan_reports_a_position() {
    let o = lro(&[
        "--mock",
        &fx("mocks/example_4_2.json"),
        "plan",
        &fx("plans/broken.sql"),
        "--db",
        &fx("restaurants"),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("2:1"), "{}", stderr(&o));
}

#[test]
fn classical_plan_makes_no_calls() {
    let o = lro(&[
        "--mock",
        &fx("mocks/example_4_2.json"),
        "plan",
        &fx("plans/classical.sql"),
        "--db",
        &fx("restaurants"),
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), "Name,Location\nAlley Wok,Palo Alto\n");
    assert!(stderr(&o).contains("calls: 0"));
}

#[test]
fn slow_backend_is_a_backend_exit() {
    let dir = tempfile::tempdir().unwrap();
    let mock = dir.path().join("slow.json");
    std::fs::write(
        &mock,
        r#"{"default": "{\"keep\": true}", "latency_ms": 5000}"#,
    )
    .unwrap();
    let args = |extra: &[&str]| {
        let mut a = vec!["--mock", mock.to_str().unwrap()];
        a.extend_from_slice(extra);
        a.extend(["op", "select", "-g", "row", "--variant", "ONE", "-l", "x"]);
        a.into_iter().map(String::from).collect::<Vec<_>>()
    };
    let input = fx("restaurants/Restaurants.csv");
    let run = |extra: &[&str]| {
        let mut a = args(extra);
        a.extend(["-i".to_string(), input.clone()]);
        lro(&a.iter().map(String::as_str).collect::<Vec<_>>())
    };
    let o = run(&["--timeout-secs", "1"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert_eq!(run(&[]).status.code(), Some(0));

    let cfg = dir.path().join("lro.toml");
    std::fs::write(&cfg, "[backend]\ntimeout_secs = 1\n").unwrap();
    let c = cfg.to_str().unwrap();
    assert_eq!(run(&["--config", c]).status.code(), Some(3));
    assert_eq!(
        run(&["--config", c, "--timeout-secs", "60"]).status.code(),
        Some(0)
    );
}

#[test]
fn malformed_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[backend]\nparalelism = 3\n").unwrap();
    let o = lro(&[
        "--config",
        cfg.to_str().unwrap(),
        "--mock",
        &fx("mocks/example_4_2.json"),
        "plan",
        &fx("plans/classical.sql"),
        "--db",
        &fx("restaurants"),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

fn bench_dirs(queries: &Value) -> (tempfile::TempDir, PathBuf, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let dbs = dir.path().join("dbs");
    std::fs::create_dir_all(dbs.join("restaurants")).unwrap();
    std::fs::copy(
        fixtures().join("restaurants/Restaurants.csv"),
        dbs.join("restaurants/Restaurants.csv"),
    )
    .unwrap();
    let suite = dir.path().join("suite.json");
    std::fs::write(
        &suite,
        serde_json::to_string(&json!({"name": "synthetic", "queries": queries})).unwrap(),
    )
    .unwrap();
    let out = dir.path().join("out");
    (dir, dbs, suite, out)
}

#[test]
fn empty_suite_reports_zero_queries() {
    let (_d, dbs, suite, out) = bench_dirs(&json!([]));
    let o = lro(&[
        "--mock",
        &fx("mocks/example_4_2.json"),
        "bench",
        suite.to_str().unwrap(),
        "--databases",
        dbs.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["overall"]["total"], 0);
    assert_eq!(report["queries"].as_array().unwrap().len(), 0);
}

#[test]
fn sixty_query_suite_prints_the_reported_accuracy() {
    let plan = std::fs::read_to_string(fixtures().join("plans/example_4_2.sql")).unwrap();
    let queries: Vec<Value> = (0..60)
        .map(|i| {
            let answer = if i < 52 { "Alley Wok" } else { "Tokyo Table" };
            json!({
                "id": format!("q{i:02}"),
                "question": "Best Asian restaurant in the Bay Area?",
                "database": "restaurants",
                "plan": plan,
                "ground_truth": {"columns": ["Name"], "rows": [[answer]]},
                "annotations": {"lro_count": 2, "table_count": 1 + i % 3, "hop_count": 1 + i % 2, "knowledge_level": 1 + i % 3}
            })
        })
        .collect();
    let (_d, dbs, suite, out) = bench_dirs(&Value::Array(queries));
    let o = lro(&[
        "--mock",
        &fx("mocks/example_4_2.json"),
        "bench",
        suite.to_str().unwrap(),
        "--databases",
        dbs.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["overall"]["passed"], 52);
    let acc = report["overall"]["accuracy"].as_f64().unwrap();
    let printed = stdout(&o);
    let overall = printed.lines().find(|l| l.starts_with("overall")).unwrap();
    assert!(
        overall.ends_with(&format!("{:.2}%", acc * 100.0)),
        "{overall}"
    );
    assert!(overall.ends_with("86.67%"));
    let csv = std::fs::read_to_string(out.join("queries.csv")).unwrap();
    assert_eq!(csv.lines().count(), 61);
}

#[test]
fn sweep_writes_one_record_per_run() {
    let dir = tempfile::tempdir().unwrap();
    let records = dir.path().join("records.csv");
    let curve = dir.path().join("curve.csv");
    let o = lro(&[
        "sweep",
        "--oracle",
        "--synthetic",
        "60",
        "--scales",
        "10,60",
        "--batch-sizes",
        "1,all",
        "--repeats",
        "10",
        "--records",
        records.to_str().unwrap(),
        "--curve",
        curve.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(&records).unwrap();
    assert_eq!(text.lines().count(), 1 + 40);
    assert!(text.lines().skip(1).all(|l| l.contains(",ok,1,")));
    assert_eq!(std::fs::read_to_string(&curve).unwrap(), stdout(&o));
}

#[test]
fn sweep_rejects_descending_scales() {
    let dir = tempfile::tempdir().unwrap();
    let records = dir.path().join("r.csv");
    let o = lro(&[
        "sweep",
        "--oracle",
        "--scales",
        "100,10",
        "--records",
        records.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}
