use std::path::Path;
use std::process::{Command, Output};

use hrl_core::acpi::{improve_policy, ActionValues, OptimizerConfig};
use hrl_core::basis::{BasisChoice, FeatureContext};
use hrl_core::data::{load_batch, FileFormat, Policy, Schema, SoftmaxPolicy};
use hrl_core::grouping::{refit_groups, GroupAssignment};
use hrl_core::moment::assemble;
use serde_json::Value;

fn hrl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hrl"))
        .current_dir(dir)
        .env_remove("HRL_THREADS")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Small two-group batch plus the target policy file.
fn workspace(n: usize, t: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let out = hrl(
        dir.path(),
        &["simulate", "--n-per-group", &n.to_string(), "--t", &t.to_string(), "--seed", "3", "--out", "sim.csv"],
    );
    ok(&out);
    std::fs::write(
        dir.path().join("target.json"),
        r#"{"type":"softmax","alpha":[[0.0,1.5,-1.0]],"intercept":true}"#,
    )
    .unwrap();
    dir
}

const EVAL: &[&str] = &[
    "evaluate",
    "--data",
    "sim.csv",
    "--policy",
    "target.json",
    "--gamma",
    "0.6",
    "--grouping",
    "kmeans:k=2",
];

#[test]
fn missing_data_is_a_config_error_naming_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let out = hrl(dir.path(), &["evaluate", "--policy", "p.json", "--gamma", "0.6"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--data"), "{}", stderr(&out));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "levle = 0.9\n").unwrap();
    let out = hrl(dir.path(), &["--config", "c.toml", "evaluate", "--data", "x.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("levle"));
}

#[test]
fn malformed_data_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.csv"), "traj_id,t,x_1,action\na,0,1.0,0\n").unwrap();
    std::fs::write(dir.path().join("p.json"), r#"{"type":"softmax","alpha":[[0.0,0.0]]}"#).unwrap();
    let out = hrl(dir.path(), &["evaluate", "--data", "bad.csv", "--policy", "p.json", "--gamma", "0.5"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn degenerate_design_is_a_numerical_error() {
    let dir = tempfile::tempdir().unwrap();
    // constant states and a single observed action leave the moment matrix singular
    let mut csv = String::from("traj_id,t,x_1,action,reward\n");
    for i in 0..4 {
        for t in 0..=3 {
            csv.push_str(&format!("tr{i},{t},0.0,0,{}\n", i as f64 * 0.1));
        }
    }
    std::fs::write(dir.path().join("flat.csv"), csv).unwrap();
    std::fs::write(dir.path().join("p.json"), r#"{"type":"softmax","alpha":[[0.0,0.0]]}"#).unwrap();
    let out = hrl(
        dir.path(),
        &["evaluate", "--data", "flat.csv", "--policy", "p.json", "--gamma", "0.5", "--n-actions", "2"],
    );
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
}

#[test]
fn simulate_writes_batch_and_membership() {
    let dir = workspace(100, 10);
    let batch = std::fs::read_to_string(dir.path().join("sim.csv")).unwrap();
    // T + 1 rows per trajectory, the last carrying the terminal state
    assert_eq!(batch.lines().count(), 1 + 200 * 11);
    let members = std::fs::read_to_string(dir.path().join("sim.membership.csv")).unwrap();
    let mut lines = members.lines();
    assert_eq!(lines.next(), Some("traj_id,group"));
    let groups: Vec<&str> = lines.map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(groups.len(), 200);
    assert_eq!(groups.iter().filter(|g| **g == "1").count(), 100);
    let meta = read_json(&dir.path().join("sim.meta.json"));
    assert_eq!(meta["config"]["sim"]["seed"], 3);
}

#[test]
fn evaluate_reports_groups_and_is_reproducible() {
    let dir = workspace(40, 10);
    let mut a = EVAL.to_vec();
    a.extend(["--out", "r1.json"]);
    ok(&hrl(dir.path(), &a));
    let mut b = EVAL.to_vec();
    b.extend(["--out", "r2.json", "--threads", "2"]);
    let out = hrl(dir.path(), &b);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("K = 2"));

    let r1 = std::fs::read(dir.path().join("r1.json")).unwrap();
    let r2 = std::fs::read(dir.path().join("r2.json")).unwrap();
    assert_eq!(r1, r2, "results depend on the run or the thread count");

    let doc = read_json(&dir.path().join("r1.json"));
    assert_eq!(doc["K"], 2);
    let groups = doc["groups"].as_array().unwrap();
    assert_eq!(groups.len(), 2);
    for g in groups {
        let ci = g["ci"].as_array().unwrap();
        let v = g["V_R"].as_f64().unwrap();
        assert!(ci[0].as_f64().unwrap() < v && v < ci[1].as_f64().unwrap());
        assert_eq!(g["members"].as_array().unwrap().len(), 40);
    }
    assert_eq!(doc["config"]["data"]["gamma"], 0.6);
    assert_eq!(doc["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn embedded_settings_replay_the_run() {
    let dir = workspace(30, 8);
    let mut a = EVAL.to_vec();
    a.extend(["--level", "0.9", "--out", "r.json"]);
    ok(&hrl(dir.path(), &a));
    let doc = read_json(&dir.path().join("r.json"));
    std::fs::write(dir.path().join("s.json"), doc["config"].to_string()).unwrap();
    ok(&hrl(dir.path(), &["--config", "s.json", "evaluate", "--out", "replay.json"]));
    assert_eq!(
        std::fs::read(dir.path().join("r.json")).unwrap(),
        std::fs::read(dir.path().join("replay.json")).unwrap()
    );
}

#[test]
fn flags_override_the_config_file() {
    let dir = workspace(30, 8);
    std::fs::write(
        dir.path().join("c.toml"),
        "level = 0.8\npolicy = \"target.json\"\n[data]\npath = \"sim.csv\"\ngamma = 0.6\n[model]\ngrouping = \"kmeans:k=2\"\n",
    )
    .unwrap();
    ok(&hrl(dir.path(), &["--config", "c.toml", "evaluate", "--out", "file.json"]));
    ok(&hrl(dir.path(), &["--config", "c.toml", "evaluate", "--level", "0.99", "--out", "flag.json"]));
    let file = read_json(&dir.path().join("file.json"));
    let flag = read_json(&dir.path().join("flag.json"));
    assert_eq!(file["config"]["level"], 0.8);
    assert_eq!(flag["config"]["level"], 0.99);
    let width = |d: &Value| {
        let ci = d["groups"][0]["ci"].as_array().unwrap();
        ci[1].as_f64().unwrap() - ci[0].as_f64().unwrap()
    };
    assert!(width(&flag) > width(&file));
}

#[test]
fn evaluate_csv_table_has_one_row_per_group() {
    let dir = workspace(30, 8);
    let mut a = EVAL.to_vec();
    a.extend(["--format", "csv", "--out", "r.csv"]);
    ok(&hrl(dir.path(), &a));
    let text = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("group,size,V_R,se,ci_lo,ci_hi"));
    assert_eq!(lines.count(), 2);
    assert!(dir.path().join("r.meta.json").exists());
}

#[test]
fn single_forced_group_for_one_step_is_pooled_evaluate_then_improve() {
    let dir = workspace(15, 6);
    let out = hrl(
        dir.path(),
        &[
            "iterate", "--data", "sim.csv", "--gamma", "0.6", "--max-outer", "1", "--force-k", "1", "--out", "it.json",
        ],
    );
    ok(&out);
    let doc = read_json(&dir.path().join("it.json"));
    assert_eq!(doc["K"], 1);
    let alpha: Vec<f64> = doc["groups"][0]["policy"]["alpha"][0]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();

    let batch = load_batch(&dir.path().join("sim.csv"), FileFormat::Csv, &Schema::default(), 0.6).unwrap();
    let basis = BasisChoice::default().resolve(batch.state_dim(), batch.all_states()).unwrap();
    let ctx = FeatureContext::new(basis, 2);
    let start = SoftmaxPolicy::zeros(2, 2, true);
    let sys = assemble(&batch, &ctx, &Policy::Softmax(start.clone())).unwrap();
    let theta = refit_groups(&sys, &GroupAssignment::single(batch.len()).unwrap()).unwrap();
    let values = ActionValues::new(&ctx, &theta[0], &batch.initial_states()).unwrap();
    let improved = improve_policy(&values, &start, &OptimizerConfig::default()).unwrap();

    assert_eq!(alpha.len(), 3);
    for (a, b) in alpha.iter().zip(&improved.policy.alpha[0]) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
    }
}

#[test]
fn iterate_trace_has_one_complete_line_per_outer_step() {
    let dir = workspace(15, 6);
    ok(&hrl(
        dir.path(),
        &[
            "iterate", "--data", "sim.csv", "--gamma", "0.6", "--grouping", "kmeans:k=2", "--max-outer", "3",
            "--trace", "trace.jsonl", "--out", "it.json",
        ],
    ));
    let doc = read_json(&dir.path().join("it.json"));
    let text = std::fs::read_to_string(dir.path().join("trace.jsonl")).unwrap();
    assert!(text.ends_with('\n'));
    let records: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len() as u64, doc["outer_iterations"].as_u64().unwrap());
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r["iter"].as_u64(), Some(i as u64 + 1));
    }
}

#[test]
fn coverage_writes_a_table_per_cell_and_group() {
    let dir = tempfile::tempdir().unwrap();
    ok(&hrl(
        dir.path(),
        &[
            "coverage", "--grid", "n=10", "t=5,6", "--reps", "50", "--truth-rollouts", "2000", "--reference-size", "300",
            "--out", "cov.csv",
        ],
    ));
    let text = std::fs::read_to_string(dir.path().join("cov.csv")).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("n_per_group,horizon,group,truth,acpe_coverage,pooled_coverage"));
    assert_eq!(lines.count(), 4);
    let meta = read_json(&dir.path().join("cov.meta.json"));
    assert_eq!(meta["config"]["t"], serde_json::json!([5, 6]));
}

#[test]
fn policy_value_table_lists_every_policy_on_every_group() {
    let dir = tempfile::tempdir().unwrap();
    ok(&hrl(
        dir.path(),
        &[
            "policy-value", "--rollouts", "40", "--t", "10", "--repetitions", "2", "--n-per-group", "20", "--data-t",
            "6", "--max-outer", "2", "--format", "json", "--out", "pv.json",
        ],
    ));
    let doc = read_json(&dir.path().join("pv.json"));
    let k = doc["acpi"]["groups"].as_array().unwrap().len();
    let rows = doc["values"].as_array().unwrap();
    assert_eq!(rows.len(), (k + 1) * 2);
    assert!(rows.iter().any(|r| r["policy"] == "pooled"));
    assert!(rows.iter().all(|r| r["rollouts"] == 80));
}
