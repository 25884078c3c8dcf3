//! Co-teaching+ between the two peer discriminators, the weighted-decay
//! noise-suspicion counts, and the cleansing pass that moves the most-flagged
//! labeled examples back to the unlabeled pool before a fresh retrain.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{LabeledSet, UnlabeledSet};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::student::{
    feature_matching_loss, generate, sample_latent, supervised_loss, supervised_losses_only,
    unsupervised_loss, accuracy, predict_real_classes, LossBundle, OptimizerKind, StudentModel,
    StudentTrainers,
};

/// Parameters of the keep-ratio schedule `R(e) = 1 - beta * min(e/ramp, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    /// Estimated noise rate, in [0, 1).
    pub beta: f64,
    /// Epochs over which the keep ratio ramps down (default 15).
    pub ramp_epochs: usize,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams { beta: 0.2, ramp_epochs: 15 }
    }
}

/// `R(e) = 1 - beta * min(e / ramp_epochs, 1)`.
pub fn keep_ratio(epoch: usize, params: &ScheduleParams) -> f64 {
    let ramp = params.ramp_epochs.max(1) as f64;
    1.0 - params.beta * (epoch as f64 / ramp).min(1.0)
}

/// Indices where the two prediction vectors differ.
pub fn disagreement_mask(preds1: &[usize], preds2: &[usize]) -> Vec<usize> {
    debug_assert_eq!(preds1.len(), preds2.len());
    preds1
        .iter()
        .zip(preds2)
        .enumerate()
        .filter(|(_, (a, b))| a != b)
        .map(|(i, _)| i)
        .collect()
}

/// The `ceil(ratio * |candidates|)` candidates with the smallest losses.
/// Ties break toward the smaller index.
pub fn small_loss_select(losses: &[f64], candidates: &[usize], ratio: f64) -> Vec<usize> {
    if candidates.is_empty() {
        return Vec::new();
    }
    let keep = ((ratio * candidates.len() as f64).ceil() as usize).min(candidates.len());
    let mut order: Vec<usize> = candidates.to_vec();
    order.sort_by(|&a, &b| {
        losses[a]
            .partial_cmp(&losses[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(keep);
    order.sort_unstable();
    order
}

/// Noise-suspicion flags: peers disagree AND both peers differ from the
/// observed label.
pub fn flag_noisy(preds1: &[usize], preds2: &[usize], observed: &[usize]) -> Vec<bool> {
    debug_assert!(preds1.len() == preds2.len() && preds2.len() == observed.len());
    (0..observed.len())
        .map(|i| preds1[i] != preds2[i] && preds1[i] != observed[i] && preds2[i] != observed[i])
        .collect()
}

/// How per-epoch flags fold into the running counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountRecurrence {
    /// `T <- alpha * T + flag`: old counts decay each epoch, so early-stage
    /// flags are down-weighted.
    Decay,
    /// `T <- T + alpha * flag`: every epoch weighs the same.
    Uniform,
}

/// Per-example weighted noise-suspicion counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CountTable {
    pub counts: BTreeMap<u64, f64>,
    pub alpha: f64,
    pub recurrence: CountRecurrence,
}

impl CountTable {
    pub fn new(ids: &[u64], alpha: f64, recurrence: CountRecurrence) -> Self {
        CountTable {
            counts: ids.iter().map(|&id| (id, 0.0)).collect(),
            alpha,
            recurrence,
        }
    }

    /// Folds one epoch of binary flags into the table.
    pub fn update_counts(&mut self, epoch_flags: &BTreeSet<u64>) {
        match self.recurrence {
            CountRecurrence::Decay => {
                for (id, count) in self.counts.iter_mut() {
                    let flag = f64::from(u8::from(epoch_flags.contains(id)));
                    *count = self.alpha * *count + flag;
                }
            }
            CountRecurrence::Uniform => {
                for (id, count) in self.counts.iter_mut() {
                    let flag = f64::from(u8::from(epoch_flags.contains(id)));
                    *count += self.alpha * flag;
                }
            }
        }
    }
}

/// Outcome of the removal selection: which labeled examples move to the
/// unlabeled pool.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CleanseReport {
    /// Removed ids with their counts, ordered by count descending.
    pub removed: Vec<(u64, f64)>,
    pub tau: f64,
    pub labeled_after: usize,
    pub unlabeled_after: usize,
}

impl CleanseReport {
    pub fn removed_ids(&self) -> BTreeSet<u64> {
        self.removed.iter().map(|&(id, _)| id).collect()
    }
}

/// Top `ceil(tau * |table|)` ids by count descending; ties break toward the
/// smaller id.
pub fn select_removal(table: &CountTable, tau: f64) -> Result<CleanseReport> {
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::InvalidArgument("tau must be in [0, 1)".into()));
    }
    let n = table.counts.len();
    let n_remove = (tau * n as f64).ceil() as usize;
    let mut entries: Vec<(u64, f64)> = table.counts.iter().map(|(&id, &c)| (id, c)).collect();
    entries.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    entries.truncate(n_remove);
    Ok(CleanseReport {
        removed: entries,
        tau,
        labeled_after: n - n_remove,
        unlabeled_after: 0, // filled in by cleanse
    })
}

/// Moves the report's removed examples from the labeled to the unlabeled
/// pool, stripping their labels. Features pass through bit-identical.
pub fn cleanse(
    m_l: &LabeledSet,
    m_u: &UnlabeledSet,
    report: &CleanseReport,
) -> Result<(LabeledSet, UnlabeledSet, CleanseReport)> {
    let removed = report.removed_ids();
    let labeled_ids: BTreeSet<u64> = m_l.ids.iter().copied().collect();
    if !removed.is_subset(&labeled_ids) {
        return Err(Error::InvalidArgument("removed ids not a subset of M_l".into()));
    }
    let keep_rows: Vec<usize> = (0..m_l.len())
        .filter(|&i| !removed.contains(&m_l.ids[i]))
        .collect();
    let move_rows: Vec<usize> = (0..m_l.len())
        .filter(|&i| removed.contains(&m_l.ids[i]))
        .collect();

    let san_labeled = m_l.subset(&keep_rows);
    let moved = m_l.subset(&move_rows);
    let mut features = Array2::zeros((m_u.len() + moved.len(), m_l.dim()));
    features
        .slice_mut(ndarray::s![..m_u.len(), ..])
        .assign(&m_u.features);
    features
        .slice_mut(ndarray::s![m_u.len().., ..])
        .assign(&moved.features);
    let mut ids = m_u.ids.clone();
    ids.extend(&moved.ids);
    let san_unlabeled = UnlabeledSet { features, ids };

    let mut out_report = report.clone();
    out_report.labeled_after = san_labeled.len();
    out_report.unlabeled_after = san_unlabeled.len();
    Ok((san_labeled, san_unlabeled, out_report))
}

/// The labeled/unlabeled pair after cyclic duplication to equal sizes.
///
/// Duplicated rows get fresh synthetic ids; `labeled_origin` maps each row of
/// the (possibly duplicated) labeled set back to its source id so flags can
/// be attributed to the original example.
#[derive(Debug, Clone)]
pub struct AlignedPair {
    pub labeled: LabeledSet,
    pub unlabeled: UnlabeledSet,
    pub labeled_origin: Vec<u64>,
}

/// Repeats the smaller set cyclically until both sets have the same size.
pub fn duplicate_to_match(m_l: &LabeledSet, m_u: &UnlabeledSet) -> Result<AlignedPair> {
    if m_l.is_empty() || m_u.is_empty() {
        return Err(Error::InvalidArgument(
            "both labeled and unlabeled sets must be non-empty".into(),
        ));
    }
    let target = m_l.len().max(m_u.len());
    let cyc = |n: usize| -> Vec<usize> { (0..target).map(|i| i % n).collect() };

    let max_id = m_l
        .ids
        .iter()
        .chain(&m_u.ids)
        .copied()
        .max()
        .unwrap_or(0);

    let (labeled, labeled_origin) = if m_l.len() < target {
        let rows = cyc(m_l.len());
        let mut dup = m_l.subset(&rows);
        let origin: Vec<u64> = dup.ids.clone();
        // fresh ids for the repeated tail
        for (i, id) in dup.ids.iter_mut().enumerate().skip(m_l.len()) {
            *id = max_id + 1 + (i - m_l.len()) as u64;
        }
        (dup, origin)
    } else {
        (m_l.clone(), m_l.ids.clone())
    };

    let unlabeled = if m_u.len() < target {
        let rows = cyc(m_u.len());
        let mut dup = m_u.subset(&rows);
        for (i, id) in dup.ids.iter_mut().enumerate().skip(m_u.len()) {
            *id = max_id + 1_000_000 + (i - m_u.len()) as u64;
        }
        dup
    } else {
        m_u.clone()
    };

    Ok(AlignedPair {
        labeled,
        unlabeled,
        labeled_origin,
    })
}

/// Knobs of the robust training drivers.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RobustConfig {
    pub batch: usize,
    pub eta: f64,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub schedule: ScheduleParams,
    /// True for co-teaching+ (select within the disagreement set); false for
    /// plain co-teaching (select over the whole mini-batch).
    pub disagreement_gate: bool,
    /// Epochs at the start during which the gate stays off even when
    /// enabled, so the peers separate from their random initializations
    /// before disagreement means anything.
    pub warmup_epochs: usize,
}

/// Per-epoch observables of a student training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub keep_ratio: f64,
    pub d1: LossBundle,
    pub d2: LossBundle,
    pub train_acc_d1: f64,
    pub train_acc_d2: f64,
    pub test_acc_d1: f64,
    pub test_acc_d2: f64,
    pub disagreement_frac: f64,
    pub fallback_batches: usize,
}

/// Result of one driver run.
#[derive(Debug)]
pub struct TrainRun {
    pub model: StudentModel,
    pub metrics: Vec<EpochMetrics>,
    /// Per-epoch sets of origin ids that satisfied both flag criteria in at
    /// least one mini-batch (only filled when flags were collected).
    pub epoch_flags: Vec<BTreeSet<u64>>,
}

/// Optional held-out evaluation data for per-epoch metrics.
#[derive(Debug, Clone, Copy)]
pub struct EvalSet<'a> {
    pub features: &'a Array2<f64>,
    pub labels: &'a [usize],
}

fn epoch_eval(
    model: &StudentModel,
    labeled: &LabeledSet,
    eval: Option<EvalSet<'_>>,
) -> Result<(f64, f64, f64, f64)> {
    let train_d1 = accuracy(&model.d1, &labeled.features, &labeled.labels)?;
    let train_d2 = accuracy(&model.d2, &labeled.features, &labeled.labels)?;
    let (test_d1, test_d2) = match eval {
        Some(e) => (
            accuracy(&model.d1, e.features, e.labels)?,
            accuracy(&model.d2, e.features, e.labels)?,
        ),
        None => (0.0, 0.0),
    };
    Ok((train_d1, train_d2, test_d1, test_d2))
}

/// Co-teaching(+) driver over the semi-supervised GAN student.
///
/// Per mini-batch: both discriminators predict the labeled batch on their
/// pre-update parameters; the candidate pool is the disagreement set (or the
/// whole batch when the gate is off or the disagreement set is empty, which
/// counts as a fallback); each discriminator picks its `R(e)` smallest-loss
/// candidates; the supervised update crosses over (D1 trains on D2's pick
/// and vice versa); both add the unsupervised loss; the generator then steps
/// on the averaged feature-matching loss.
pub fn run_pate_plus(
    mut model: StudentModel,
    cfg: &RobustConfig,
    m_l: &LabeledSet,
    m_u: &UnlabeledSet,
    eval: Option<EvalSet<'_>>,
    rng: &mut Rng,
    collect_flags: bool,
) -> Result<TrainRun> {
    let aligned = duplicate_to_match(m_l, m_u)?;
    let labeled = &aligned.labeled;
    let unlabeled = &aligned.unlabeled;
    let n = labeled.len();
    let batch = cfg.batch.max(1).min(n);
    let n_batches = (n / batch).max(1);
    let mut trainers = StudentTrainers::new(&model, cfg.optimizer, cfg.eta);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut epoch_flags = Vec::new();

    for epoch in 0..cfg.epochs {
        let ratio = keep_ratio(epoch, &cfg.schedule);
        let mut l_order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut l_order);
        let mut u_order: Vec<usize> = (0..unlabeled.len()).collect();
        rng.shuffle(&mut u_order);

        let mut flags_this_epoch = BTreeSet::new();
        let mut fallback_batches = 0usize;
        let mut disagree_total = 0usize;
        let mut seen_total = 0usize;
        let mut acc_d1 = LossBundle::default();
        let mut acc_d2 = LossBundle::default();

        for b in 0..n_batches {
            let l_rows = &l_order[b * batch..(b + 1) * batch];
            let u_rows = &u_order[b * batch..(b + 1) * batch];
            let lx = labeled.features.select(Axis(0), l_rows);
            let ly: Vec<usize> = l_rows.iter().map(|&i| labeled.labels[i]).collect();
            let ux = unlabeled.features.select(Axis(0), u_rows);

            let z = sample_latent(batch, model.latent_dim, rng);
            let gen_batch = generate(&model.g, &z)?;

            // pre-update predictions
            let preds1 = predict_real_classes(&model.d1, &lx)?;
            let preds2 = predict_real_classes(&model.d2, &lx)?;

            if collect_flags {
                let flags = flag_noisy(&preds1, &preds2, &ly);
                for (pos, &flagged) in flags.iter().enumerate() {
                    if flagged {
                        flags_this_epoch.insert(aligned.labeled_origin[l_rows[pos]]);
                    }
                }
            }

            let disagreement = disagreement_mask(&preds1, &preds2);
            disagree_total += disagreement.len();
            seen_total += batch;
            let all_rows: Vec<usize> = (0..batch).collect();
            let gate_on = cfg.disagreement_gate && epoch >= cfg.warmup_epochs;
            let candidates: &[usize] = if !gate_on {
                &all_rows
            } else if disagreement.is_empty() {
                fallback_batches += 1;
                &all_rows
            } else {
                &disagreement
            };

            let losses1 = supervised_losses_only(&model.d1, &lx, &ly)?;
            let losses2 = supervised_losses_only(&model.d2, &lx, &ly)?;
            let sel1 = small_loss_select(&losses1, candidates, ratio);
            let sel2 = small_loss_select(&losses2, candidates, ratio);

            // cross update: D1 learns on D2's selection, D2 on D1's
            let sub = |rows: &[usize]| -> (Array2<f64>, Vec<usize>) {
                (
                    lx.select(Axis(0), rows),
                    rows.iter().map(|&i| ly[i]).collect(),
                )
            };
            let (x_for_d1, y_for_d1) = sub(&sel2);
            let (x_for_d2, y_for_d2) = sub(&sel1);

            let sup1 = supervised_loss(&model.d1, &x_for_d1, &y_for_d1)?;
            let (unsup1, unsup1_grads) = unsupervised_loss(&model.d1, &ux, &gen_batch)?;
            let mut grads1 = sup1.grads.clone();
            grads1.add_scaled(&unsup1_grads, 1.0);

            let sup2 = supervised_loss(&model.d2, &x_for_d2, &y_for_d2)?;
            let (unsup2, unsup2_grads) = unsupervised_loss(&model.d2, &ux, &gen_batch)?;
            let mut grads2 = sup2.grads.clone();
            grads2.add_scaled(&unsup2_grads, 1.0);

            trainers.d1.step(&mut model.d1, &grads1)?;
            trainers.d2.step(&mut model.d2, &grads2)?;

            let (fm, g_grads) =
                feature_matching_loss(&model.g, &[&model.d1, &model.d2], &ux, &z)?;
            trainers.g.step(&mut model.g, &g_grads)?;

            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
            acc_d1.supervised += mean(&sup1.per_example) / n_batches as f64;
            acc_d1.unsupervised += unsup1 / n_batches as f64;
            acc_d1.feature_matching += fm / n_batches as f64;
            acc_d2.supervised += mean(&sup2.per_example) / n_batches as f64;
            acc_d2.unsupervised += unsup2 / n_batches as f64;
            acc_d2.feature_matching += fm / n_batches as f64;
        }

        let (train_d1, train_d2, test_d1, test_d2) = epoch_eval(&model, labeled, eval)?;
        metrics.push(EpochMetrics {
            epoch,
            keep_ratio: ratio,
            d1: acc_d1,
            d2: acc_d2,
            train_acc_d1: train_d1,
            train_acc_d2: train_d2,
            test_acc_d1: test_d1,
            test_acc_d2: test_d2,
            disagreement_frac: disagree_total as f64 / seen_total.max(1) as f64,
            fallback_batches,
        });
        if collect_flags {
            epoch_flags.push(flags_this_epoch);
        }
    }

    Ok(TrainRun {
        model,
        metrics,
        epoch_flags,
    })
}

/// Plain baseline driver: same architecture and data flow, but only D1 (plus
/// the generator) trains; D2 stays frozen at its initialization.
pub fn run_plain(
    mut model: StudentModel,
    cfg: &RobustConfig,
    m_l: &LabeledSet,
    m_u: &UnlabeledSet,
    eval: Option<EvalSet<'_>>,
    rng: &mut Rng,
) -> Result<TrainRun> {
    let aligned = duplicate_to_match(m_l, m_u)?;
    let labeled = &aligned.labeled;
    let unlabeled = &aligned.unlabeled;
    let n = labeled.len();
    let batch = cfg.batch.max(1).min(n);
    let n_batches = (n / batch).max(1);
    let mut trainers = StudentTrainers::new(&model, cfg.optimizer, cfg.eta);
    let mut metrics = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut l_order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut l_order);
        let mut u_order: Vec<usize> = (0..unlabeled.len()).collect();
        rng.shuffle(&mut u_order);
        let mut acc_d1 = LossBundle::default();

        for b in 0..n_batches {
            let l_rows = &l_order[b * batch..(b + 1) * batch];
            let u_rows = &u_order[b * batch..(b + 1) * batch];
            let lx = labeled.features.select(Axis(0), l_rows);
            let ly: Vec<usize> = l_rows.iter().map(|&i| labeled.labels[i]).collect();
            let ux = unlabeled.features.select(Axis(0), u_rows);
            let bundle = crate::student::train_step_plain(
                &mut model,
                &mut trainers,
                &lx,
                &ly,
                &ux,
                rng,
            )?;
            acc_d1.supervised += bundle.supervised / n_batches as f64;
            acc_d1.unsupervised += bundle.unsupervised / n_batches as f64;
            acc_d1.feature_matching += bundle.feature_matching / n_batches as f64;
        }

        let (train_d1, train_d2, test_d1, test_d2) = epoch_eval(&model, labeled, eval)?;
        metrics.push(EpochMetrics {
            epoch,
            keep_ratio: 1.0,
            d1: acc_d1,
            d2: LossBundle::default(),
            train_acc_d1: train_d1,
            train_acc_d2: train_d2,
            test_acc_d1: test_d1,
            test_acc_d2: test_d2,
            disagreement_frac: 0.0,
            fallback_batches: 0,
        });
    }

    Ok(TrainRun {
        model,
        metrics,
        epoch_flags: Vec::new(),
    })
}

/// Result of the full filter / remove / retrain pipeline.
#[derive(Debug)]
pub struct PatePlusPlusRun {
    pub model: StudentModel,
    pub report: CleanseReport,
    pub step1_metrics: Vec<EpochMetrics>,
    pub step3_metrics: Vec<EpochMetrics>,
    pub counts: CountTable,
}

/// Filter (co-teaching+ with flag counting), remove the top-tau fraction,
/// then retrain a fresh model on the sanitized sets.
#[allow(clippy::too_many_arguments)]
pub fn run_pate_plusplus(
    model_factory: &mut dyn FnMut(&str) -> StudentModel,
    cfg: &RobustConfig,
    retrain_cfg: &RobustConfig,
    m_l: &LabeledSet,
    m_u: &UnlabeledSet,
    tau: f64,
    alpha: f64,
    recurrence: CountRecurrence,
    eval: Option<EvalSet<'_>>,
    rng: &mut Rng,
) -> Result<PatePlusPlusRun> {
    // Step 1: filter
    let step1 = run_pate_plus(
        model_factory("step1"),
        cfg,
        m_l,
        m_u,
        eval,
        &mut rng.child("step1"),
        true,
    )?;
    let mut table = CountTable::new(&m_l.ids, alpha, recurrence);
    for flags in &step1.epoch_flags {
        table.update_counts(flags);
    }

    // Step 2: remove
    let report = select_removal(&table, tau)?;
    let (san_l, san_u, report) = cleanse(m_l, m_u, &report)?;

    // Step 3: retrain from a fresh initialization
    let step3 = run_pate_plus(
        model_factory("step3"),
        retrain_cfg,
        &san_l,
        &san_u,
        eval,
        &mut rng.child("step3"),
        false,
    )?;

    Ok(PatePlusPlusRun {
        model: step3.model,
        report,
        step1_metrics: step1.metrics,
        step3_metrics: step3.metrics,
        counts: table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_clusters;

    #[test]
    fn keep_ratio_formula() {
        let p = ScheduleParams { beta: 0.2, ramp_epochs: 15 };
        assert_eq!(keep_ratio(0, &p), 1.0);
        assert!((keep_ratio(15, &p) - 0.8).abs() < 1e-15);
        assert!((keep_ratio(40, &p) - 0.8).abs() < 1e-15);
        let any_beta = ScheduleParams { beta: 0.77, ramp_epochs: 15 };
        assert_eq!(keep_ratio(0, &any_beta), 1.0);
    }

    #[test]
    fn disagreement_mask_cases() {
        assert!(disagreement_mask(&[1, 2, 3], &[1, 2, 3]).is_empty());
        assert_eq!(disagreement_mask(&[1, 2, 3], &[1, 3, 3]), vec![1]);
        let mut rng = Rng::new(1);
        let a: Vec<usize> = (0..200).map(|_| rng.below(4)).collect();
        let b: Vec<usize> = (0..200).map(|_| rng.below(4)).collect();
        let mask = disagreement_mask(&a, &b);
        let brute: Vec<usize> = (0..200).filter(|&i| a[i] != b[i]).collect();
        assert_eq!(mask, brute);
    }

    #[test]
    fn small_loss_select_cases() {
        let losses = [0.1, 0.5, 0.2, 0.9];
        let all = [0, 1, 2, 3];
        assert_eq!(small_loss_select(&losses, &all, 0.5), vec![0, 2]);
        assert_eq!(small_loss_select(&losses, &all, 1.0), vec![0, 1, 2, 3]);
        // stable ties
        let tied = [0.3, 0.3, 0.3];
        assert_eq!(small_loss_select(&tied, &[0, 1, 2], 1.0 / 3.0), vec![0]);
        assert!(small_loss_select(&losses, &[], 0.5).is_empty());
        // output size is always ceil(ratio * n) and a subset of candidates
        let mut rng = Rng::new(2);
        for _ in 0..50 {
            let n = 1 + rng.below(20);
            let losses: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
            let cands: Vec<usize> = (0..n).collect();
            let ratio = rng.uniform().max(0.05);
            let sel = small_loss_select(&losses, &cands, ratio);
            assert_eq!(sel.len(), (ratio * n as f64).ceil() as usize);
            assert!(sel.iter().all(|i| cands.contains(i)));
        }
    }

    #[test]
    fn flag_noisy_truth_table() {
        assert_eq!(flag_noisy(&[0], &[1], &[2]), vec![true]);
        assert_eq!(flag_noisy(&[2], &[1], &[2]), vec![false]);
        assert_eq!(flag_noisy(&[1], &[1], &[2]), vec![false]);
        // exhaustive over all (p1, p2, y) for K <= 5
        for k in 2..=5usize {
            for p1 in 0..k {
                for p2 in 0..k {
                    for y in 0..k {
                        let expect = p1 != p2 && p1 != y && p2 != y;
                        assert_eq!(flag_noisy(&[p1], &[p2], &[y]), vec![expect]);
                    }
                }
            }
        }
    }

    #[test]
    fn count_decay_recurrence() {
        let mut table = CountTable::new(&[7], 0.9, CountRecurrence::Decay);
        let flagged: BTreeSet<u64> = [7].into();
        for _ in 0..3 {
            table.update_counts(&flagged);
        }
        assert!((table.counts[&7] - 2.71).abs() < 1e-12);

        // never flagged stays zero
        let mut table = CountTable::new(&[7], 0.9, CountRecurrence::Decay);
        for _ in 0..5 {
            table.update_counts(&BTreeSet::new());
        }
        assert_eq!(table.counts[&7], 0.0);

        // alpha = 1 degenerates to a plain epoch counter
        let mut table = CountTable::new(&[7], 1.0, CountRecurrence::Decay);
        for _ in 0..4 {
            table.update_counts(&flagged);
        }
        assert_eq!(table.counts[&7], 4.0);
    }

    #[test]
    fn decay_downweights_early_flags() {
        // flagged only in epoch 1 ends up strictly below flagged only in the
        // last epoch
        let mut early = CountTable::new(&[0], 0.9, CountRecurrence::Decay);
        let mut late = CountTable::new(&[0], 0.9, CountRecurrence::Decay);
        let flagged: BTreeSet<u64> = [0].into();
        let empty = BTreeSet::new();
        for e in 0..10 {
            early.update_counts(if e == 0 { &flagged } else { &empty });
            late.update_counts(if e == 9 { &flagged } else { &empty });
        }
        assert!(early.counts[&0] < late.counts[&0]);

        // with Uniform they are equal
        let mut early = CountTable::new(&[0], 0.9, CountRecurrence::Uniform);
        let mut late = CountTable::new(&[0], 0.9, CountRecurrence::Uniform);
        for e in 0..10 {
            early.update_counts(if e == 0 { &flagged } else { &empty });
            late.update_counts(if e == 9 { &flagged } else { &empty });
        }
        assert_eq!(early.counts[&0], late.counts[&0]);
    }

    #[test]
    fn select_removal_cases() {
        let mut table = CountTable::new(&[10, 20, 30], 0.9, CountRecurrence::Decay);
        table.counts.insert(10, 2.7);
        table.counts.insert(20, 1.0);
        table.counts.insert(30, 0.0);
        let r = select_removal(&table, 0.0).unwrap();
        assert!(r.removed.is_empty());
        let r = select_removal(&table, 1.0 / 3.0).unwrap();
        assert_eq!(r.removed_ids(), [10].into());
        // exact tie at the cut: smaller id wins inclusion
        table.counts.insert(20, 2.7);
        let r = select_removal(&table, 1.0 / 3.0).unwrap();
        assert_eq!(r.removed_ids(), [10].into());
        // brute-force comparison
        let mut entries: Vec<(u64, f64)> = table.counts.iter().map(|(&i, &c)| (i, c)).collect();
        entries.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        assert_eq!(r.removed[0].0, entries[0].0);
    }

    #[test]
    fn cleanse_conservation() {
        let set = synth_clusters(3, 10, 2, 0.1, 1).unwrap();
        let m_l = set.subset(&(0..20).collect::<Vec<_>>());
        let m_u = set.subset(&(20..30).collect::<Vec<_>>()).to_unlabeled();
        let mut table = CountTable::new(&m_l.ids, 0.9, CountRecurrence::Decay);
        for id in m_l.ids.iter().take(5) {
            table.counts.insert(*id, 3.0);
        }
        let report = select_removal(&table, 0.25).unwrap();
        let (san_l, san_u, report) = cleanse(&m_l, &m_u, &report).unwrap();
        assert_eq!(san_l.len() + report.removed.len(), m_l.len());
        assert_eq!(san_u.len(), m_u.len() + report.removed.len());
        // no example disappears: id multiset is preserved
        let mut before: Vec<u64> = m_l.ids.iter().chain(&m_u.ids).copied().collect();
        let mut after: Vec<u64> = san_l.ids.iter().chain(&san_u.ids).copied().collect();
        before.sort_unstable();
        after.sort_unstable();
        assert_eq!(before, after);
        // moved feature rows are bit-identical
        for &(id, _) in &report.removed {
            let src_row = m_l.ids.iter().position(|&i| i == id).unwrap();
            let dst_row = san_u.ids.iter().position(|&i| i == id).unwrap();
            assert_eq!(
                m_l.features.row(src_row).to_vec(),
                san_u.features.row(dst_row).to_vec()
            );
        }
        // empty report leaves everything unchanged
        let empty = select_removal(&CountTable::new(&m_l.ids, 0.9, CountRecurrence::Decay), 0.0)
            .unwrap();
        let (l2, u2, _) = cleanse(&m_l, &m_u, &empty).unwrap();
        assert_eq!(l2.ids, m_l.ids);
        assert_eq!(u2.ids, m_u.ids);
    }

    #[test]
    fn duplicate_to_match_cases() {
        let set = synth_clusters(2, 10, 2, 0.1, 1).unwrap();
        let m_l = set.subset(&(0..3).collect::<Vec<_>>());
        let m_u = set.subset(&(3..10).collect::<Vec<_>>()).to_unlabeled();
        let pair = duplicate_to_match(&m_l, &m_u).unwrap();
        assert_eq!(pair.labeled.len(), 7);
        assert_eq!(pair.unlabeled.len(), 7);
        // cyclic rule [0,1,2,0,1,2,0] on the origin ids
        let expect: Vec<u64> = vec![0, 1, 2, 0, 1, 2, 0]
            .into_iter()
            .map(|i| m_l.ids[i as usize])
            .collect();
        assert_eq!(pair.labeled_origin, expect);
        // duplicates never mix features and labels across examples
        for row in 0..7 {
            let src = row % 3;
            assert_eq!(pair.labeled.labels[row], m_l.labels[src]);
            assert_eq!(
                pair.labeled.features.row(row).to_vec(),
                m_l.features.row(src).to_vec()
            );
        }
        // ids unique
        let unique: BTreeSet<u64> = pair.labeled.ids.iter().copied().collect();
        assert_eq!(unique.len(), 7);

        // equal sizes pass through unchanged
        let m_l7 = set.subset(&(0..7).collect::<Vec<_>>());
        let pair = duplicate_to_match(&m_l7, &m_u).unwrap();
        assert_eq!(pair.labeled.ids, m_l7.ids);
        assert_eq!(pair.unlabeled.ids, m_u.ids);

        // empty set rejected
        let empty = set.subset(&[]);
        assert!(duplicate_to_match(&empty, &m_u).is_err());
    }

    fn quick_cfg(epochs: usize) -> RobustConfig {
        RobustConfig {
            batch: 16,
            eta: 0.01,
            epochs,
            optimizer: OptimizerKind::Adam,
            schedule: ScheduleParams { beta: 0.3, ramp_epochs: 10 },
            disagreement_gate: true,
            warmup_epochs: 0,
        }
    }

    #[test]
    fn degenerate_identical_discriminators_exercise_fallback() {
        let set = synth_clusters(2, 20, 2, 0.1, 5).unwrap();
        let m_l = set.subset(&(0..20).collect::<Vec<_>>());
        let m_u = set.subset(&(20..40).collect::<Vec<_>>()).to_unlabeled();
        let mut model = StudentModel::new(2, 2, 4, &[8], &[6], 9);
        model.d2 = model.d1.clone(); // force agreement everywhere at epoch 0
        let mut cfg = quick_cfg(1);
        cfg.schedule.beta = 0.0; // ratio 1
        cfg.eta = 0.0; // keep them identical across batches
        let mut rng = Rng::new(3);
        let run = run_pate_plus(model, &cfg, &m_l, &m_u, None, &mut rng, false).unwrap();
        let m = &run.metrics[0];
        assert_eq!(m.disagreement_frac, 0.0);
        assert!(m.fallback_batches > 0);
    }

    #[test]
    fn cross_update_uses_peer_selection() {
        // One batch, SGD: replicate the driver's arithmetic independently and
        // check D1's parameter delta equals eta * (sup grad on D2's pick +
        // unsup grad).
        let set = synth_clusters(3, 8, 2, 0.2, 6).unwrap();
        let m_l = set.subset(&(0..12).collect::<Vec<_>>());
        let m_u = set.subset(&(12..24).collect::<Vec<_>>()).to_unlabeled();
        let model = StudentModel::new(2, 3, 4, &[8], &[6], 17);
        let cfg = RobustConfig {
            batch: 12,
            eta: 0.05,
            epochs: 1,
            optimizer: OptimizerKind::Sgd,
            schedule: ScheduleParams { beta: 0.5, ramp_epochs: 1 },
            disagreement_gate: true,
            warmup_epochs: 0,
        };
        let d1_before = model.d1.flatten_params();

        // replicate the rng stream the driver consumes
        let mut rng = Rng::new(99);
        let mut shadow = rng.clone();
        let run = run_pate_plus(model.clone(), &cfg, &m_l, &m_u, None, &mut rng, false).unwrap();

        let aligned = duplicate_to_match(&m_l, &m_u).unwrap();
        let mut l_order: Vec<usize> = (0..12).collect();
        shadow.shuffle(&mut l_order);
        let mut u_order: Vec<usize> = (0..12).collect();
        shadow.shuffle(&mut u_order);
        let lx = aligned.labeled.features.select(Axis(0), &l_order);
        let ly: Vec<usize> = l_order.iter().map(|&i| aligned.labeled.labels[i]).collect();
        let ux = aligned.unlabeled.features.select(Axis(0), &u_order);
        let z = sample_latent(12, model.latent_dim, &mut shadow);
        let gen_batch = generate(&model.g, &z).unwrap();
        let preds1 = predict_real_classes(&model.d1, &lx).unwrap();
        let preds2 = predict_real_classes(&model.d2, &lx).unwrap();
        let mut cands = disagreement_mask(&preds1, &preds2);
        if cands.is_empty() {
            cands = (0..12).collect();
        }
        let ratio = keep_ratio(0, &cfg.schedule);
        let losses2 = supervised_losses_only(&model.d2, &lx, &ly).unwrap();
        let sel2 = small_loss_select(&losses2, &cands, ratio);
        let x1 = lx.select(Axis(0), &sel2);
        let y1: Vec<usize> = sel2.iter().map(|&i| ly[i]).collect();
        let sup1 = supervised_loss(&model.d1, &x1, &y1).unwrap();
        let (_, unsup1) = unsupervised_loss(&model.d1, &ux, &gen_batch).unwrap();
        let mut expect = model.d1.clone();
        let mut total = sup1.grads.clone();
        total.add_scaled(&unsup1, 1.0);
        expect.sgd_step(&total, cfg.eta).unwrap();

        let got = run.model.d1.flatten_params();
        let want = expect.flatten_params();
        assert_ne!(got, d1_before, "D1 did not move");
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn pate_plusplus_tau_zero_matches_independent_pate_plus() {
        let set = synth_clusters(3, 20, 2, 0.15, 8).unwrap();
        let m_l = set.subset(&(0..30).collect::<Vec<_>>());
        let m_u = set.subset(&(30..60).collect::<Vec<_>>()).to_unlabeled();
        let cfg = quick_cfg(3);
        let mut factory = |tag: &str| {
            let seed = crate::rng::derive_seed(123, tag);
            StudentModel::new(2, 3, 4, &[8], &[6], seed)
        };
        let mut rng = Rng::new(7);
        let run = run_pate_plusplus(
            &mut factory,
            &cfg,
            &cfg,
            &m_l,
            &m_u,
            0.0,
            0.9,
            CountRecurrence::Decay,
            None,
            &mut rng,
        )
        .unwrap();
        assert!(run.report.removed.is_empty());

        // the independent run: same model seed, same child rng stream
        let indep_model =
            StudentModel::new(2, 3, 4, &[8], &[6], crate::rng::derive_seed(123, "step3"));
        let mut indep_rng = Rng::new(7).child("step3");
        let indep = run_pate_plus(indep_model, &cfg, &m_l, &m_u, None, &mut indep_rng, false)
            .unwrap();
        assert_eq!(
            run.model.d1.flatten_params(),
            indep.model.d1.flatten_params()
        );
    }
}
