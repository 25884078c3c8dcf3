//! End-to-end experiment harness: partition sensitive data, train the
//! teacher ensemble, label the public pool privately, train the student in
//! one of four modes, and evaluate on a held-out test slice reserved before
//! any labeling happened.
//!
//! Every random draw descends from the master seed through named sub-streams
//! so each stage is independently reproducible.

use std::path::PathBuf;

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::accountant::{DpGuarantee, RdpLedger};
use crate::aggregate::{label_public_data, AggregationConfig, AggregationMode};
use crate::data::{
    inject_label_noise, load_csv, load_idx, partition_disjoint, synth_clusters, LabeledSet,
    NoiseMask, UnlabeledSet,
};
use crate::error::{Error, Result};
use crate::net::{cross_entropy, softmax, Activation, AdamState, DenseNet};
use crate::rng::Rng;
use crate::robust::{
    run_pate_plus, run_pate_plusplus, run_plain, CleanseReport, CountRecurrence, EpochMetrics,
    EvalSet, RobustConfig, ScheduleParams,
};
use crate::student::{accuracy, OptimizerKind, StudentModel};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSource {
    Synth {
        k: usize,
        n_per_class: usize,
        dim: usize,
        spread: f64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        max_n: usize,
    },
    Csv {
        path: PathBuf,
        label_column: String,
    },
}

/// How the loaded set splits into sensitive data, public training pool, and
/// the held-out test slice.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitConfig {
    /// Size of the public pool taken from the end of the shuffled set; the
    /// rest is sensitive and only ever seen by teachers.
    pub public_n: usize,
    /// Held-out test slice, reserved from the public pool before labeling.
    pub test_n: usize,
    /// How many public records are submitted to the aggregator as queries.
    pub queries: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch: usize,
    pub eta: f64,
    pub optimizer: OptimizerKind,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BudgetCap {
    pub eps_max: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregationSettings {
    pub sigma_check: f64,
    pub sigma_answer: f64,
    /// Defaults to 0.7 * n_teachers when absent.
    pub consensus_threshold: Option<f64>,
    pub mode: AggregationMode,
    pub budget: Option<BudgetCap>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudentConfig {
    pub d_hidden: Vec<usize>,
    pub g_hidden: Vec<usize>,
    pub latent_dim: usize,
    pub batch: usize,
    pub eta: f64,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobustSettings {
    pub beta: f64,
    pub ramp_epochs: usize,
    /// Epochs before the disagreement gate activates.
    #[serde(default)]
    pub warmup_epochs: usize,
    pub alpha: f64,
    pub tau: f64,
    pub recurrence: CountRecurrence,
    /// Step-3 epoch count; defaults to the student epoch count.
    pub retrain_epochs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StudentMode {
    #[serde(rename = "pate")]
    Pate,
    #[serde(rename = "coteach")]
    Coteach,
    #[serde(rename = "pate+")]
    PatePlus,
    #[serde(rename = "pate++")]
    PatePlusPlus,
}

impl StudentMode {
    pub const ALL: [StudentMode; 4] = [
        StudentMode::Pate,
        StudentMode::Coteach,
        StudentMode::PatePlus,
        StudentMode::PatePlusPlus,
    ];
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub split: SplitConfig,
    pub n_teachers: usize,
    pub teacher: TeacherConfig,
    pub aggregation: AggregationSettings,
    pub student: StudentConfig,
    pub robust: RobustSettings,
    pub mode: StudentMode,
    pub seed: u64,
    /// Delta at which the report's privacy guarantee is stated.
    pub delta: f64,
    /// Extra uniform label noise injected into the aggregated labels, with a
    /// ground-truth mask kept for evaluation.
    pub inject_noise_rate: Option<f64>,
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, why: &str| {
            Err(Error::InvalidConfig(format!("{field}: {why}")))
        };
        match &self.dataset {
            DatasetSource::Synth { k, dim, n_per_class, spread } => {
                if *k < 2 {
                    return fail("dataset.k", "need at least 2 classes");
                }
                if *dim < 2 {
                    return fail("dataset.dim", "need at least 2 dimensions");
                }
                if *n_per_class == 0 {
                    return fail("dataset.n_per_class", "must be positive");
                }
                if *spread < 0.0 {
                    return fail("dataset.spread", "must be non-negative");
                }
            }
            DatasetSource::Idx { max_n, .. } => {
                if *max_n == 0 {
                    return fail("dataset.max_n", "must be positive");
                }
            }
            DatasetSource::Csv { .. } => {}
        }
        if self.split.test_n >= self.split.public_n {
            return fail("split.test_n", "must be smaller than public_n");
        }
        if self.split.queries > self.split.public_n - self.split.test_n {
            return fail("split.queries", "exceeds the public training pool");
        }
        if self.n_teachers == 0 {
            return fail("n_teachers", "must be positive");
        }
        if self.aggregation.sigma_check < 0.0 || self.aggregation.sigma_answer < 0.0 {
            return fail("aggregation.sigma", "must be non-negative");
        }
        if let Some(t) = self.aggregation.consensus_threshold {
            if t < 0.0 {
                return fail("aggregation.consensus_threshold", "must be non-negative");
            }
        }
        if !(0.0..1.0).contains(&self.delta) || self.delta == 0.0 {
            return fail("delta", "need 0 < delta < 1");
        }
        if !(0.0..1.0).contains(&self.robust.beta) {
            return fail("robust.beta", "need 0 <= beta < 1");
        }
        if self.robust.ramp_epochs == 0 {
            return fail("robust.ramp_epochs", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.robust.alpha) || self.robust.alpha == 0.0 {
            return fail("robust.alpha", "need 0 < alpha <= 1");
        }
        if !(0.0..1.0).contains(&self.robust.tau) {
            return fail("robust.tau", "need 0 <= tau < 1");
        }
        if let Some(r) = self.inject_noise_rate {
            if !(0.0..1.0).contains(&r) {
                return fail("inject_noise_rate", "need 0 <= rate < 1");
            }
        }
        if self.student.epochs == 0 || self.student.batch == 0 {
            return fail("student", "epochs and batch must be positive");
        }
        if self.student.d_hidden.is_empty() {
            return fail("student.d_hidden", "need at least one hidden layer");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregationStats {
    pub answered: usize,
    pub abstained: usize,
    pub truncated: bool,
    /// Fraction of answered labels that disagree with ground truth (known
    /// for every source, since queries come from a labeled pool).
    pub label_error_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub privacy: Option<DpGuarantee>,
    pub aggregation: Option<AggregationStats>,
    pub injected_noise_count: usize,
    /// Per-epoch metrics of the final training phase.
    pub epochs: Vec<EpochMetrics>,
    /// Step-1 metrics when the mode retrains (pate++ only).
    pub step1_epochs: Option<Vec<EpochMetrics>>,
    pub cleanse: Option<CleanseReport>,
    /// Fraction of removed examples whose labels really were corrupted,
    /// measured against the injection mask when one exists.
    pub cleanse_precision: Option<f64>,
    pub final_test_acc_d1: f64,
    pub final_test_acc_d2: f64,
    pub final_test_acc: f64,
    pub wall_clock_secs: f64,
}

/// Everything a run produces.
#[derive(Debug)]
pub struct ExperimentOutput {
    pub report: RunReport,
    pub ledger: RdpLedger,
    pub model: StudentModel,
}

fn load_dataset(source: &DatasetSource, seed: u64) -> Result<LabeledSet> {
    match source {
        DatasetSource::Synth { k, n_per_class, dim, spread } => {
            synth_clusters(*k, *n_per_class, *dim, *spread, seed)
        }
        // a bad data file named by the config counts as a config problem
        DatasetSource::Idx { images, labels, max_n } => load_idx(images, labels, *max_n)
            .map_err(|e| Error::InvalidConfig(format!("dataset: {e}"))),
        DatasetSource::Csv { path, label_column } => load_csv(path, label_column)
            .map_err(|e| Error::InvalidConfig(format!("dataset: {e}"))),
    }
}

/// Trains a plain supervised classifier (relu hidden layers, K logits) with
/// softmax cross entropy.
pub fn train_classifier(
    set: &LabeledSet,
    hidden: &[usize],
    epochs: usize,
    batch: usize,
    eta: f64,
    optimizer: OptimizerKind,
    rng: &mut Rng,
) -> Result<DenseNet> {
    let mut shape: Vec<(usize, Activation)> =
        hidden.iter().map(|&w| (w, Activation::Relu)).collect();
    shape.push((set.n_classes, Activation::Identity));
    let mut net = DenseNet::new(set.dim(), &shape, rng);
    let mut adam = AdamState::new(&net);
    let n = set.len();
    let batch = batch.max(1).min(n);
    let n_batches = (n / batch).max(1);

    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        for b in 0..n_batches {
            let rows = &order[b * batch..(b + 1) * batch];
            let x = set.features.select(Axis(0), rows);
            let trace = net.forward(&x)?;
            let mut grad = ndarray::Array2::zeros((rows.len(), set.n_classes));
            for (i, &row) in rows.iter().enumerate() {
                let logits: Vec<f64> = trace.logits().row(i).to_vec();
                let p = softmax(&logits);
                let (_, g) = cross_entropy(&p, set.labels[row])?;
                for (j, gj) in g.iter().enumerate() {
                    grad[[i, j]] = gj / rows.len() as f64;
                }
            }
            let (grads, _) = net.backward(&trace, &grad)?;
            match optimizer {
                OptimizerKind::Sgd => net.sgd_step(&grads, eta)?,
                OptimizerKind::Adam => net.adam_step(&grads, &mut adam, eta)?,
            }
        }
    }
    Ok(net)
}

struct SplitOut {
    sensitive: LabeledSet,
    queries: LabeledSet,
    unlabeled: UnlabeledSet,
    test: LabeledSet,
}

fn split_dataset(set: &LabeledSet, split: &SplitConfig, seed: u64) -> Result<SplitOut> {
    if split.public_n >= set.len() {
        return Err(Error::InvalidConfig(format!(
            "split.public_n: {} leaves no sensitive data out of {}",
            split.public_n,
            set.len()
        )));
    }
    let mut rows: Vec<usize> = (0..set.len()).collect();
    Rng::new(seed).shuffle(&mut rows);
    let sensitive_n = set.len() - split.public_n;
    let sensitive = set.subset(&rows[..sensitive_n]);
    let public = &rows[sensitive_n..];
    let train_n = split.public_n - split.test_n;
    let test = set.subset(&public[train_n..]);
    let queries = set.subset(&public[..split.queries]);
    let unlabeled = set.subset(&public[split.queries..train_n]).to_unlabeled();
    Ok(SplitOut {
        sensitive,
        queries,
        unlabeled,
        test,
    })
}

/// Runs the full pipeline described by `config`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    config.validate()?;
    let start = std::time::Instant::now();
    let master = Rng::new(config.seed);

    let data_seed = master.child("dataset").next_raw();
    let full = load_dataset(&config.dataset, data_seed)?;
    let k = full.n_classes;
    let split = split_dataset(&full, &config.split, master.child("split").next_raw())?;

    // teachers on disjoint shards
    let partition = partition_disjoint(
        &split.sensitive,
        config.n_teachers,
        master.child("partition").next_raw(),
    )?;
    // shards are independent, so teachers train in parallel; each owns a
    // derived rng stream and results are collected in shard order
    let teacher_results: Vec<Result<DenseNet>> = std::thread::scope(|s| {
        let handles: Vec<_> = partition
            .shards
            .iter()
            .enumerate()
            .map(|(i, shard)| {
                let mut trng = master.child(&format!("teacher-{i}"));
                let tc = &config.teacher;
                s.spawn(move || {
                    train_classifier(
                        shard, &tc.hidden, tc.epochs, tc.batch, tc.eta, tc.optimizer, &mut trng,
                    )
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let teachers = teacher_results.into_iter().collect::<Result<Vec<_>>>()?;

    // private labeling
    let agg_cfg = AggregationConfig {
        sigma_check: config.aggregation.sigma_check,
        sigma_answer: config.aggregation.sigma_answer,
        consensus_threshold: config
            .aggregation
            .consensus_threshold
            .unwrap_or(0.7 * config.n_teachers as f64),
        mode: config.aggregation.mode,
    };
    let mut ledger = RdpLedger::default();
    let mut agg_rng = master.child("aggregation");
    let labeling = label_public_data(
        &teachers,
        &split.queries.to_unlabeled(),
        k,
        &agg_cfg,
        &mut agg_rng,
        &mut ledger,
        config.aggregation.budget.map(|b| (b.eps_max, b.delta)),
    )?;
    if labeling.labeled.is_empty() {
        return Err(Error::InvalidArgument(
            "aggregation answered no queries; nothing to train the student on".into(),
        ));
    }
    let label_errors = labeling
        .labeled
        .ids
        .iter()
        .zip(&labeling.labeled.labels)
        .filter(|(id, &label)| {
            let row = split.queries.ids.iter().position(|i| i == *id).unwrap();
            split.queries.labels[row] != label
        })
        .count();
    let agg_stats = AggregationStats {
        answered: labeling.answered,
        abstained: labeling.abstained,
        truncated: labeling.truncated,
        label_error_rate: label_errors as f64 / labeling.answered.max(1) as f64,
    };

    // optional controlled extra noise on the aggregated labels
    let (mut m_l, mask) = match config.inject_noise_rate {
        Some(rate) => inject_label_noise(
            &labeling.labeled,
            rate,
            master.child("noise-injection").next_raw(),
        )?,
        None => (labeling.labeled.clone(), NoiseMask::default()),
    };
    m_l.n_classes = k;

    // unlabeled pool: unanswered queries plus the never-queried remainder
    let m_u = concat_unlabeled(&labeling.remaining, &split.unlabeled);

    let robust_cfg = RobustConfig {
        batch: config.student.batch,
        eta: config.student.eta,
        epochs: config.student.epochs,
        optimizer: config.student.optimizer,
        schedule: ScheduleParams {
            beta: config.robust.beta,
            ramp_epochs: config.robust.ramp_epochs,
        },
        disagreement_gate: true,
        warmup_epochs: config.robust.warmup_epochs,
    };
    let eval = EvalSet {
        features: &split.test.features,
        labels: &split.test.labels,
    };
    let input_dim = m_l.dim();
    let student_seed = crate::rng::derive_seed(config.seed, "student");
    let make_model = |tag: &str| {
        StudentModel::new(
            input_dim,
            k,
            config.student.latent_dim,
            &config.student.d_hidden,
            &config.student.g_hidden,
            crate::rng::derive_seed(student_seed, tag),
        )
    };
    let mut student_rng = master.child("student-train");

    let (model, epochs, step1_epochs, cleanse, cleanse_precision) = match config.mode {
        StudentMode::Pate => {
            let run = run_plain(
                make_model("plain"),
                &robust_cfg,
                &m_l,
                &m_u,
                Some(eval),
                &mut student_rng,
            )?;
            (run.model, run.metrics, None, None, None)
        }
        StudentMode::Coteach => {
            let mut cfg = robust_cfg;
            cfg.disagreement_gate = false;
            let run = run_pate_plus(
                make_model("coteach"),
                &cfg,
                &m_l,
                &m_u,
                Some(eval),
                &mut student_rng,
                false,
            )?;
            (run.model, run.metrics, None, None, None)
        }
        StudentMode::PatePlus => {
            let run = run_pate_plus(
                make_model("pate+"),
                &robust_cfg,
                &m_l,
                &m_u,
                Some(eval),
                &mut student_rng,
                false,
            )?;
            (run.model, run.metrics, None, None, None)
        }
        StudentMode::PatePlusPlus => {
            let mut retrain_cfg = robust_cfg;
            if let Some(e) = config.robust.retrain_epochs {
                retrain_cfg.epochs = e;
            }
            let mut factory = |tag: &str| make_model(tag);
            let run = run_pate_plusplus(
                &mut factory,
                &robust_cfg,
                &retrain_cfg,
                &m_l,
                &m_u,
                config.robust.tau,
                config.robust.alpha,
                config.robust.recurrence,
                Some(eval),
                &mut student_rng,
            )?;
            let precision = if mask.is_empty() || run.report.removed.is_empty() {
                None
            } else {
                let hits = run
                    .report
                    .removed
                    .iter()
                    .filter(|(id, _)| mask.is_corrupted(*id))
                    .count();
                Some(hits as f64 / run.report.removed.len() as f64)
            };
            (
                run.model,
                run.step3_metrics,
                Some(run.step1_metrics),
                Some(run.report),
                precision,
            )
        }
    };

    let acc_d1 = accuracy(&model.d1, &split.test.features, &split.test.labels)?;
    let acc_d2 = match config.mode {
        StudentMode::Pate => acc_d1, // D2 never trained; report D1
        _ => accuracy(&model.d2, &split.test.features, &split.test.labels)?,
    };
    let privacy = ledger.to_dp(config.delta)?;

    let report = RunReport {
        config: config.clone(),
        seed: config.seed,
        privacy: Some(privacy),
        aggregation: Some(agg_stats),
        injected_noise_count: mask.len(),
        epochs,
        step1_epochs,
        cleanse,
        cleanse_precision,
        final_test_acc_d1: acc_d1,
        final_test_acc_d2: acc_d2,
        final_test_acc: acc_d1.max(acc_d2),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok(ExperimentOutput {
        report,
        ledger,
        model,
    })
}

fn concat_unlabeled(a: &UnlabeledSet, b: &UnlabeledSet) -> UnlabeledSet {
    if a.is_empty() {
        return b.clone();
    }
    if b.is_empty() {
        return a.clone();
    }
    let mut features = ndarray::Array2::zeros((a.len() + b.len(), a.dim()));
    features.slice_mut(ndarray::s![..a.len(), ..]).assign(&a.features);
    features.slice_mut(ndarray::s![a.len().., ..]).assign(&b.features);
    let mut ids = a.ids.clone();
    ids.extend(&b.ids);
    UnlabeledSet { features, ids }
}

impl Rng {
    /// First raw draw of this stream, for seeding child components that own
    /// their generator.
    pub fn next_raw(mut self) -> u64 {
        self.next_u64()
    }
}
