//! Binary-level tests: exit codes, output schemas, determinism, and the
//! config echo round-trip.

use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_patepp"))
}

fn small_config() -> Value {
    serde_json::json!({
        "dataset": {"kind": "synth", "k": 3, "n_per_class": 120, "dim": 2, "spread": 0.08},
        "split": {"public_n": 160, "test_n": 60, "queries": 80},
        "n_teachers": 10,
        "teacher": {"hidden": [12], "epochs": 20, "batch": 10, "eta": 0.01, "optimizer": "adam"},
        "aggregation": {"sigma_check": 2.0, "sigma_answer": 2.0, "consensus_threshold": 5.0,
                         "mode": "confident-gnmax", "budget": null},
        "student": {"d_hidden": [16], "g_hidden": [12], "latent_dim": 4, "batch": 20,
                     "eta": 0.01, "optimizer": "adam", "epochs": 4},
        "robust": {"beta": 0.2, "ramp_epochs": 15, "warmup_epochs": 2, "alpha": 0.9,
                    "tau": 0.2, "recurrence": "decay", "retrain_epochs": null},
        "mode": "pate",
        "seed": 7,
        "delta": 1e-5,
        "inject_noise_rate": null,
        "out_dir": null
    })
}

fn write_config(dir: &Path, config: &Value) -> std::path::PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(config).unwrap()).unwrap();
    path
}

fn run_ok(args: &[&str]) {
    let out = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn run_writes_report_ledger_and_model() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &small_config());
    let out = dir.path().join("out");
    run_ok(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);

    let report: Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(report["privacy"]["epsilon"].as_f64().unwrap() > 0.0);
    assert_eq!(report["privacy"]["delta"].as_f64().unwrap(), 1e-5);
    assert!(report["final_test_acc"].as_f64().is_some());

    let ledger: Value =
        serde_json::from_str(&fs::read_to_string(out.join("ledger.json")).unwrap()).unwrap();
    assert!(ledger["orders"].as_array().unwrap().len() >= 10);
    assert_eq!(
        ledger["orders"].as_array().unwrap().len(),
        ledger["eps_rdp"].as_array().unwrap().len()
    );
    // answered/abstained counts reconcile with the event log
    let answered = report["aggregation"]["answered"].as_u64().unwrap();
    let abstained = report["aggregation"]["abstained"].as_u64().unwrap();
    assert_eq!(answered + abstained, 80);
    assert_eq!(
        ledger["events"].as_array().unwrap().len() as u64,
        2 * answered + abstained
    );

    assert!(out.join("model.json").exists());
}

fn strip_timing(report: &mut Value) {
    report.as_object_mut().unwrap().remove("wall_clock_secs");
}

#[test]
fn same_seed_reports_identical_modulo_timing() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &small_config());
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        run_ok(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    }
    let mut a: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("a/report.json")).unwrap())
            .unwrap();
    let mut b: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("b/report.json")).unwrap())
            .unwrap();
    strip_timing(&mut a);
    strip_timing(&mut b);
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap()
    );
}

#[test]
fn config_echo_reproduces_the_run() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &small_config());
    let first = dir.path().join("first");
    run_ok(&["run", "--config", cfg.to_str().unwrap(), "--out", first.to_str().unwrap()]);
    let report: Value =
        serde_json::from_str(&fs::read_to_string(first.join("report.json")).unwrap()).unwrap();

    // feed the echoed config back in
    let echoed = dir.path().join("echoed.json");
    fs::write(&echoed, serde_json::to_string(&report["config"]).unwrap()).unwrap();
    let second = dir.path().join("second");
    run_ok(&["run", "--config", echoed.to_str().unwrap(), "--out", second.to_str().unwrap()]);
    let mut a = report;
    let mut b: Value =
        serde_json::from_str(&fs::read_to_string(second.join("report.json")).unwrap()).unwrap();
    strip_timing(&mut a);
    strip_timing(&mut b);
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap()
    );
}

#[test]
fn seed_flag_overrides_config() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &small_config());
    let out = dir.path().join("out");
    run_ok(&[
        "run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "99",
    ]);
    let report: Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"].as_u64().unwrap(), 99);
    assert_eq!(report["config"]["seed"].as_u64().unwrap(), 99);
}

#[test]
fn invalid_config_exits_2() {
    let dir = TempDir::new().unwrap();
    let mut config = small_config();
    config["delta"] = serde_json::json!(0.0);
    let cfg = write_config(dir.path(), &config);
    let out = bin().args(["run", "--config", cfg.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("delta"));
}

#[test]
fn missing_config_file_exits_2() {
    let out = bin().args(["run", "--config", "/nonexistent/cfg.json"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unreadable_csv_dataset_exits_2() {
    let dir = TempDir::new().unwrap();
    let mut config = small_config();
    config["dataset"] = serde_json::json!({
        "kind": "csv",
        "path": dir.path().join("missing.csv"),
        "label_column": "label"
    });
    let cfg = write_config(dir.path(), &config);
    let out = bin().args(["run", "--config", cfg.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn starved_budget_exits_3() {
    // a cap so tight no query can be answered is a runtime failure
    let dir = TempDir::new().unwrap();
    let mut config = small_config();
    config["aggregation"]["budget"] = serde_json::json!({"eps_max": 0.05, "delta": 1e-5});
    let cfg = write_config(dir.path(), &config);
    let out = bin().args(["run", "--config", cfg.to_str().unwrap()]).output().unwrap();
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn sweep_sigma_schema_and_monotone_epsilon() {
    let dir = TempDir::new().unwrap();
    let mut config = small_config();
    config["student"]["epochs"] = serde_json::json!(2);
    let cfg = write_config(dir.path(), &config);
    let out = dir.path().join("out");
    run_ok(&[
        "sweep-sigma", "--config", cfg.to_str().unwrap(),
        "--values", "8,4,2", "--out", out.to_str().unwrap(),
    ]);
    let text = fs::read_to_string(out.join("curves.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "sigma,epsilon,answered,label_error_rate,acc_pate,acc_coteach,acc_pate_plus,acc_pate_plus_plus"
    );
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 3);
    // decreasing sigma, non-decreasing epsilon
    assert!(rows[0][1] <= rows[1][1]);
    assert!(rows[1][1] <= rows[2][1]);
}

#[test]
fn sweep_sigma_rejects_single_value() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &small_config());
    let out = bin()
        .args(["sweep-sigma", "--config", cfg.to_str().unwrap(), "--values", "4"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_param_beta_schema() {
    let dir = TempDir::new().unwrap();
    let mut config = small_config();
    config["student"]["epochs"] = serde_json::json!(2);
    let cfg = write_config(dir.path(), &config);
    let out = dir.path().join("out");
    run_ok(&[
        "sweep-param", "--config", cfg.to_str().unwrap(), "--param", "beta",
        "--values", "0.1,0.2,0.3", "--out", out.to_str().unwrap(),
    ]);
    let text = fs::read_to_string(out.join("table.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "param,value,acc_pate,acc_coteach,acc_pate_plus,acc_pate_plus_plus"
    );
    assert_eq!(lines.count(), 3);
}

#[test]
fn sweep_param_rejects_unknown_param() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &small_config());
    let out = bin()
        .args(["sweep-param", "--config", cfg.to_str().unwrap(), "--param", "gamma", "--values", "1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn audit_privacy_empty_ledger_and_monotone_delta() {
    let dir = TempDir::new().unwrap();
    let ledger = patepp_core::accountant::RdpLedger::default();
    let path = dir.path().join("ledger.json");
    fs::write(&path, ledger.to_json().unwrap()).unwrap();
    let out = dir.path().join("out");
    run_ok(&[
        "audit-privacy", "--ledger", path.to_str().unwrap(),
        "--values", "1e-5,1e-8", "--out", out.to_str().unwrap(),
    ]);
    let text = fs::read_to_string(out.join("table.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "delta,epsilon,order");
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    // empty ledger: epsilon = ln(1/delta) / (lambda_max - 1)
    let lmax: f64 = 256.0;
    assert!((rows[0][1] - (1e5f64).ln() / (lmax - 1.0)).abs() < 1e-12);
    assert_eq!(rows[0][2], lmax);
    // smaller delta, larger epsilon
    assert!(rows[1][1] > rows[0][1]);
}

#[test]
fn audit_privacy_malformed_ledger_exits_2() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("ledger.json");
    fs::write(&path, "{\"orders\": [2.0], \"eps_rdp\": [], \"events\": []}").unwrap();
    let out = bin()
        .args(["audit-privacy", "--ledger", path.to_str().unwrap(), "--values", "1e-5"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn budget_cap_truncates_labeling() {
    let dir = TempDir::new().unwrap();
    let mut config = small_config();
    // wide noise makes each query cheap enough that some, but not all, of
    // the 80 queries fit under the cap
    config["aggregation"]["sigma_check"] = serde_json::json!(30.0);
    config["aggregation"]["sigma_answer"] = serde_json::json!(30.0);
    config["aggregation"]["budget"] = serde_json::json!({"eps_max": 2.0, "delta": 1e-5});
    config["student"]["epochs"] = serde_json::json!(2);
    let cfg = write_config(dir.path(), &config);
    let out = dir.path().join("out");
    run_ok(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let report: Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["aggregation"]["truncated"], Value::Bool(true));
    assert!(report["privacy"]["epsilon"].as_f64().unwrap() <= 2.0);
}
