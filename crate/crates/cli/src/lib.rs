//! Command implementations behind the `patepp` binary: single runs, sigma
//! and parameter sweeps, and offline privacy-ledger audits.
//!
//! Each command reads a JSON experiment config, writes machine-readable
//! outputs (JSON reports, CSV curves/tables) into an output directory, and
//! leaves exit-code mapping to the binary: config problems are distinguished
//! from runtime failures by [`Error`] variant.

use std::fs;
use std::path::{Path, PathBuf};

use patepp_core::accountant::RdpLedger;
use patepp_core::experiment::{run_experiment, ExperimentConfig, ExperimentOutput, StudentMode};
use patepp_core::{Error, Result};

pub const CURVES_HEADER: &str =
    "sigma,epsilon,answered,label_error_rate,acc_pate,acc_coteach,acc_pate_plus,acc_pate_plus_plus";
pub const TABLE_HEADER: &str =
    "param,value,acc_pate,acc_coteach,acc_pate_plus,acc_pate_plus_plus";
pub const AUDIT_HEADER: &str = "delta,epsilon,order";

/// Loads and validates a config, applying the optional seed override.
pub fn load_config(path: &Path, seed_override: Option<u64>) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    let mut config: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    if let Some(seed) = seed_override {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn resolve_out_dir(flag: Option<&Path>, config: &ExperimentConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| config.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Runs one experiment and writes report.json, ledger.json, and model.json.
pub fn cmd_run(config_path: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<PathBuf> {
    let config = load_config(config_path, seed)?;
    let out_dir = resolve_out_dir(out, &config);
    ensure_dir(&out_dir)?;
    let result = run_experiment(&config)?;
    write_outputs(&out_dir, &result)?;
    Ok(out_dir)
}

fn write_outputs(out_dir: &Path, result: &ExperimentOutput) -> Result<()> {
    fs::write(
        out_dir.join("report.json"),
        serde_json::to_string_pretty(&result.report)?,
    )?;
    fs::write(out_dir.join("ledger.json"), result.ledger.to_json()?)?;
    fs::write(out_dir.join("model.json"), result.model.to_json()?)?;
    Ok(())
}

fn parse_f64_values(values: &str) -> Result<Vec<f64>> {
    values
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| Error::InvalidConfig(format!("--values entry {v:?}: {e}")))
        })
        .collect()
}

struct ModeAccuracies {
    by_mode: [f64; 4],
}

/// Runs all four student modes on one config (seed-averaged over `seeds`
/// consecutive seeds) and also reports the aggregation-side numbers of the
/// first run, which do not depend on the mode.
fn run_all_modes(
    config: &ExperimentConfig,
    seeds: usize,
) -> Result<(ModeAccuracies, f64, usize, f64)> {
    let mut by_mode = [0.0f64; 4];
    let mut epsilon = 0.0;
    let mut answered = 0usize;
    let mut label_error = 0.0;
    for s in 0..seeds {
        let mut agg_captured = false;
        for (m, &mode) in StudentMode::ALL.iter().enumerate() {
            let mut cfg = config.clone();
            cfg.mode = mode;
            cfg.seed = config.seed.wrapping_add(s as u64);
            let out = run_experiment(&cfg)?;
            by_mode[m] += out.report.final_test_acc / seeds as f64;
            if !agg_captured {
                let stats = out.report.aggregation.as_ref().expect("aggregation ran");
                epsilon += out.report.privacy.expect("privacy present").epsilon / seeds as f64;
                answered += stats.answered;
                label_error += stats.label_error_rate / seeds as f64;
                agg_captured = true;
            }
        }
    }
    Ok((
        ModeAccuracies { by_mode },
        epsilon,
        answered / seeds,
        label_error,
    ))
}

/// Sweeps the answer-noise scale and writes curves.csv, one row per sigma.
pub fn cmd_sweep_sigma(
    config_path: &Path,
    values: &str,
    out: Option<&Path>,
    seed: Option<u64>,
    seeds: usize,
) -> Result<PathBuf> {
    let config = load_config(config_path, seed)?;
    let sigmas = parse_f64_values(values)?;
    if sigmas.len() < 2 {
        return Err(Error::InvalidConfig(
            "--values: sigma sweep needs at least 2 values".into(),
        ));
    }
    if sigmas.iter().any(|&s| s <= 0.0) {
        return Err(Error::InvalidConfig("--values: sigma must be positive".into()));
    }
    let out_dir = resolve_out_dir(out, &config);
    ensure_dir(&out_dir)?;

    let mut rows = Vec::new();
    for &sigma in &sigmas {
        let mut cfg = config.clone();
        cfg.aggregation.sigma_answer = sigma;
        let (acc, epsilon, answered, label_error) = run_all_modes(&cfg, seeds)?;
        rows.push(format!(
            "{sigma},{epsilon},{answered},{label_error},{},{},{},{}",
            acc.by_mode[0], acc.by_mode[1], acc.by_mode[2], acc.by_mode[3]
        ));
    }
    let path = out_dir.join("curves.csv");
    fs::write(&path, format!("{CURVES_HEADER}\n{}\n", rows.join("\n")))?;
    Ok(path)
}

/// Sweeps beta or tau and writes table.csv, one row per value.
pub fn cmd_sweep_param(
    config_path: &Path,
    param: &str,
    values: &str,
    out: Option<&Path>,
    seed: Option<u64>,
    seeds: usize,
) -> Result<PathBuf> {
    if param != "beta" && param != "tau" {
        return Err(Error::InvalidConfig(format!(
            "--param: expected beta or tau, got {param:?}"
        )));
    }
    let config = load_config(config_path, seed)?;
    let points = parse_f64_values(values)?;
    if points.is_empty() {
        return Err(Error::InvalidConfig("--values: need at least 1 value".into()));
    }
    let out_dir = resolve_out_dir(out, &config);
    ensure_dir(&out_dir)?;

    let mut rows = Vec::new();
    for &v in &points {
        let mut cfg = config.clone();
        match param {
            "beta" => cfg.robust.beta = v,
            _ => cfg.robust.tau = v,
        }
        cfg.validate()?;
        let (acc, _, _, _) = run_all_modes(&cfg, seeds)?;
        rows.push(format!(
            "{param},{v},{},{},{},{}",
            acc.by_mode[0], acc.by_mode[1], acc.by_mode[2], acc.by_mode[3]
        ));
    }
    let path = out_dir.join("table.csv");
    fs::write(&path, format!("{TABLE_HEADER}\n{}\n", rows.join("\n")))?;
    Ok(path)
}

/// Converts a stored ledger at each requested delta; writes table.csv with
/// one (delta, epsilon, order) row per delta.
pub fn cmd_audit_privacy(ledger_path: &Path, values: &str, out: Option<&Path>) -> Result<PathBuf> {
    let text = fs::read_to_string(ledger_path)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", ledger_path.display())))?;
    let ledger = RdpLedger::from_json(&text)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", ledger_path.display())))?;
    let deltas = parse_f64_values(values)?;
    if deltas.is_empty() {
        return Err(Error::InvalidConfig("--values: need at least 1 delta".into()));
    }
    let out_dir = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    ensure_dir(&out_dir)?;

    let mut rows = Vec::new();
    for &delta in &deltas {
        let g = ledger
            .to_dp(delta)
            .map_err(|e| Error::InvalidConfig(format!("--values delta {delta}: {e}")))?;
        rows.push(format!("{delta},{},{}", g.epsilon, g.order));
    }
    let path = out_dir.join("table.csv");
    fs::write(&path, format!("{AUDIT_HEADER}\n{}\n", rows.join("\n")))?;
    Ok(path)
}

/// Exit code for an error: 2 for config/input problems, 3 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig(_) | Error::Parse(_) => 2,
        _ => 3,
    }
}
