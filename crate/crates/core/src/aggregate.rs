//! Private label aggregation over a teacher ensemble.
//!
//! Teachers vote on each query; the vote histogram goes through Gaussian
//! NoisyMax, optionally preceded by the confident consensus check (a single
//! Gaussian draw added to the max count, compared against a threshold).
//! Every check and every answer appends a privacy event to the RDP ledger.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::accountant::{EventKind, RdpLedger, ANSWER_SENSITIVITY, CHECK_SENSITIVITY};
use crate::data::{LabeledSet, UnlabeledSet};
use crate::error::{Error, Result};
use crate::net::DenseNet;
use crate::rng::Rng;

/// Per-class teacher vote counts for one query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteHistogram {
    pub counts: Vec<u32>,
    pub n_teachers: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationMode {
    Gnmax,
    ConfidentGnmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregationConfig {
    /// Gaussian scale of the consensus check (sigma_1).
    pub sigma_check: f64,
    /// Gaussian scale of the answer (sigma_2).
    pub sigma_answer: f64,
    /// Consensus threshold in teacher-count units.
    pub consensus_threshold: f64,
    pub mode: AggregationMode,
}

impl AggregationConfig {
    /// Confident-GNMax with the default threshold 0.7 * n_teachers.
    pub fn confident(sigma_check: f64, sigma_answer: f64, n_teachers: usize) -> Self {
        AggregationConfig {
            sigma_check,
            sigma_answer,
            consensus_threshold: 0.7 * n_teachers as f64,
            mode: AggregationMode::ConfidentGnmax,
        }
    }
}

/// Result of aggregating one query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregationOutcome {
    Answered(usize),
    Abstained,
}

/// Counts `predictions` into a K-bin histogram.
pub fn tally(predictions: &[usize], k: usize) -> Result<VoteHistogram> {
    let mut counts = vec![0u32; k];
    for &p in predictions {
        if p >= k {
            return Err(Error::InvalidArgument(format!(
                "prediction {p} out of range for K = {k}"
            )));
        }
        counts[p] += 1;
    }
    Ok(VoteHistogram {
        counts,
        n_teachers: predictions.len() as u32,
    })
}

/// Gaussian NoisyMax: argmax of `counts[j] + N(0, sigma^2)`.
///
/// `sigma = 0` short-circuits to the plain argmax. Ties break toward the
/// smallest class index.
pub fn gnmax(hist: &VoteHistogram, sigma: f64, rng: &mut Rng) -> usize {
    let mut best = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for (j, &c) in hist.counts.iter().enumerate() {
        let noise = if sigma > 0.0 { sigma * rng.gaussian() } else { 0.0 };
        let score = f64::from(c) + noise;
        if score > best_score {
            best_score = score;
            best = j;
        }
    }
    best
}

/// Confident-GNMax: a noisy max-count check against the threshold, then an
/// independent Gaussian NoisyMax answer if the check passes.
///
/// Returns the outcome and appends the corresponding privacy events to
/// `ledger` (check always, answer only when answered).
pub fn confident_gnmax(
    hist: &VoteHistogram,
    cfg: &AggregationConfig,
    rng: &mut Rng,
    ledger: &mut RdpLedger,
) -> Result<AggregationOutcome> {
    let max_count = f64::from(*hist.counts.iter().max().expect("K >= 2"));
    let check_noise = if cfg.sigma_check > 0.0 {
        cfg.sigma_check * rng.gaussian()
    } else {
        0.0
    };
    ledger.record_event(EventKind::Check, CHECK_SENSITIVITY, effective_sigma(cfg.sigma_check))?;
    if max_count + check_noise >= cfg.consensus_threshold {
        let label = gnmax(hist, cfg.sigma_answer, rng);
        ledger.record_event(
            EventKind::Answer,
            ANSWER_SENSITIVITY,
            effective_sigma(cfg.sigma_answer),
        )?;
        Ok(AggregationOutcome::Answered(label))
    } else {
        Ok(AggregationOutcome::Abstained)
    }
}

// The accountant rejects sigma = 0 (infinite privacy cost); a noiseless run
// is an experiment degeneracy, charged at a nominal tiny sigma so the event
// log still reconciles with the query count.
fn effective_sigma(sigma: f64) -> f64 {
    if sigma > 0.0 {
        sigma
    } else {
        1e-9
    }
}

/// Argmax class predictions of a classifier net on a feature matrix.
pub fn predict_classes(net: &DenseNet, features: &Array2<f64>) -> Result<Vec<usize>> {
    let trace = net.forward(features)?;
    let logits = trace.logits();
    Ok((0..logits.nrows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// What [`label_public_data`] produced.
#[derive(Debug, Clone)]
pub struct LabelingResult {
    pub labeled: LabeledSet,
    pub remaining: UnlabeledSet,
    pub answered: usize,
    pub abstained: usize,
    /// True when a configured budget cap stopped labeling early.
    pub truncated: bool,
}

/// Labels `queries` with the teacher ensemble, in query-id order.
///
/// When `budget` is set to `(eps_max, delta)`, labeling stops before any
/// query whose worst-case cost (check + answer) would push the converted
/// epsilon past `eps_max`; the result is then flagged as truncated.
pub fn label_public_data(
    teachers: &[DenseNet],
    queries: &UnlabeledSet,
    k: usize,
    cfg: &AggregationConfig,
    rng: &mut Rng,
    ledger: &mut RdpLedger,
    budget: Option<(f64, f64)>,
) -> Result<LabelingResult> {
    if teachers.is_empty() {
        return Err(Error::InvalidArgument("no teachers".into()));
    }
    for t in teachers {
        if t.input_dim() != queries.dim() && !queries.is_empty() {
            return Err(Error::DimMismatch(
                "teacher input dim != query dim".into(),
            ));
        }
    }
    if queries.is_empty() {
        return Ok(LabelingResult {
            labeled: LabeledSet {
                features: Array2::zeros((0, queries.dim())),
                labels: vec![],
                ids: vec![],
                n_classes: k,
            },
            remaining: queries.clone(),
            answered: 0,
            abstained: 0,
            truncated: false,
        });
    }

    // all teacher predictions up front; queries are processed in id order
    let mut order: Vec<usize> = (0..queries.len()).collect();
    order.sort_by_key(|&i| queries.ids[i]);
    let per_teacher: Vec<Vec<usize>> = teachers
        .iter()
        .map(|t| predict_classes(t, &queries.features))
        .collect::<Result<_>>()?;

    let mut answered_rows = Vec::new();
    let mut answered_labels = Vec::new();
    let mut remaining_rows = Vec::new();
    let mut truncated = false;

    for &row in &order {
        if let Some((eps_max, delta)) = budget {
            let mut probe = ledger.clone();
            probe.record_event(EventKind::Check, CHECK_SENSITIVITY, effective_sigma(cfg.sigma_check))?;
            probe.record_event(
                EventKind::Answer,
                ANSWER_SENSITIVITY,
                effective_sigma(cfg.sigma_answer),
            )?;
            if probe.to_dp(delta)?.epsilon > eps_max {
                truncated = true;
                remaining_rows.push(row);
                continue;
            }
        }
        let votes: Vec<usize> = per_teacher.iter().map(|p| p[row]).collect();
        let hist = tally(&votes, k)?;
        let outcome = match cfg.mode {
            AggregationMode::ConfidentGnmax => confident_gnmax(&hist, cfg, rng, ledger)?,
            AggregationMode::Gnmax => {
                let label = gnmax(&hist, cfg.sigma_answer, rng);
                ledger.record_event(EventKind::Check, CHECK_SENSITIVITY, effective_sigma(cfg.sigma_check))?;
                ledger.record_event(
                    EventKind::Answer,
                    ANSWER_SENSITIVITY,
                    effective_sigma(cfg.sigma_answer),
                )?;
                AggregationOutcome::Answered(label)
            }
        };
        match outcome {
            AggregationOutcome::Answered(label) => {
                answered_rows.push(row);
                answered_labels.push(label);
            }
            AggregationOutcome::Abstained => remaining_rows.push(row),
        }
    }

    let labeled_features = queries.features.select(ndarray::Axis(0), &answered_rows);
    let labeled = LabeledSet {
        features: labeled_features,
        labels: answered_labels,
        ids: answered_rows.iter().map(|&i| queries.ids[i]).collect(),
        n_classes: k,
    };
    Ok(LabelingResult {
        labeled,
        remaining: queries.subset(&remaining_rows),
        answered: answered_rows.len(),
        abstained: remaining_rows.len(),
        truncated,
    })
}
