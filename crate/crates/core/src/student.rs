//! Semi-supervised GAN student: one generator and two peer discriminators
//! over K+1 classes (the extra class marks generated samples).
//!
//! Losses follow the K+1 formulation: the supervised loss is the cross
//! entropy of the renormalized real-class distribution, the unsupervised loss
//! is the real/fake split on the K+1 probability, and the generator trains on
//! the mean feature-matching loss against the penultimate activations of the
//! discriminators it faces.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{softmax, Activation, AdamState, DenseNet, ParamGrads, LOG_CLAMP};
use crate::rng::Rng;

/// Generator + two structurally identical, independently initialized peer
/// discriminators.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudentModel {
    pub g: DenseNet,
    pub d1: DenseNet,
    pub d2: DenseNet,
    pub k: usize,
    pub latent_dim: usize,
    pub master_seed: u64,
}

impl StudentModel {
    /// Builds the model from layer shapes. Discriminator hidden layers use
    /// leaky-relu, generator hidden layers tanh; both end in identity
    /// output layers. D1 and D2 get distinct seeds derived from `seed`.
    pub fn new(
        input_dim: usize,
        k: usize,
        latent_dim: usize,
        d_hidden: &[usize],
        g_hidden: &[usize],
        seed: u64,
    ) -> Self {
        assert!(!d_hidden.is_empty(), "discriminators need a hidden layer for feature matching");
        let mut d_shape: Vec<(usize, Activation)> = d_hidden
            .iter()
            .map(|&w| (w, Activation::LeakyRelu))
            .collect();
        d_shape.push((k + 1, Activation::Identity));
        let mut g_shape: Vec<(usize, Activation)> =
            g_hidden.iter().map(|&w| (w, Activation::Tanh)).collect();
        g_shape.push((input_dim, Activation::Identity));

        let root = Rng::new(seed);
        let d1 = DenseNet::new(input_dim, &d_shape, &mut root.child("student-d1"));
        let d2 = DenseNet::new(input_dim, &d_shape, &mut root.child("student-d2"));
        let g = DenseNet::new(latent_dim, &g_shape, &mut root.child("student-g"));
        StudentModel {
            g,
            d1,
            d2,
            k,
            latent_dim,
            master_seed: seed,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Standard-normal latent batch.
pub fn sample_latent(batch: usize, latent_dim: usize, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_fn((batch, latent_dim), |_| rng.gaussian())
}

/// Runs the generator on a latent batch.
pub fn generate(g: &DenseNet, z: &Array2<f64>) -> Result<Array2<f64>> {
    Ok(g.forward(z)?.logits().clone())
}

/// Renormalized real-class probabilities and the fake probability.
///
/// The renormalization `p_j / (1 - p_fake)` equals the softmax restricted to
/// the first K logits; the clamp only guards the degenerate all-fake corner.
pub fn real_class_probs(d: &DenseNet, batch: &Array2<f64>) -> Result<(Array2<f64>, Vec<f64>)> {
    let trace = d.forward(batch)?;
    let logits = trace.logits();
    let k = logits.ncols() - 1;
    let mut real = Array2::zeros((batch.nrows(), k));
    let mut fake = Vec::with_capacity(batch.nrows());
    for (i, row) in logits.axis_iter(Axis(0)).enumerate() {
        let p = softmax(row.as_slice().expect("contiguous row"));
        let p_fake = p[k];
        let denom = (1.0 - p_fake).max(LOG_CLAMP);
        for j in 0..k {
            real[[i, j]] = p[j] / denom;
        }
        fake.push(p_fake);
    }
    Ok((real, fake))
}

/// Argmax over the renormalized real classes (the fake class never wins).
pub fn predict_real_classes(d: &DenseNet, batch: &Array2<f64>) -> Result<Vec<usize>> {
    let trace = d.forward(batch)?;
    let logits = trace.logits();
    let k = logits.ncols() - 1;
    Ok((0..batch.nrows())
        .map(|i| {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for j in 0..k {
                if logits[[i, j]] > best_v {
                    best_v = logits[[i, j]];
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Classification accuracy of a discriminator on a labeled matrix.
pub fn accuracy(d: &DenseNet, features: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Ok(0.0);
    }
    let preds = predict_real_classes(d, features)?;
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Supervised loss: per-example values plus the gradient of the batch mean.
#[derive(Debug, Clone)]
pub struct SupervisedLoss {
    pub per_example: Vec<f64>,
    pub grads: ParamGrads,
}

/// The three loss values observed for one update, per discriminator.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossBundle {
    pub supervised: f64,
    pub unsupervised: f64,
    pub feature_matching: f64,
}

fn check_labels(labels: &[usize], k: usize) -> Result<()> {
    if labels.iter().any(|&y| y >= k) {
        return Err(Error::InvalidArgument(format!("label >= K = {k}")));
    }
    Ok(())
}

/// `-log p_D(y | x, y < K+1)`, i.e. cross entropy of the renormalized
/// real-class distribution at the observed label.
///
/// Per-example losses are retained for small-loss selection; the gradient is
/// for the mean over the batch.
pub fn supervised_loss(d: &DenseNet, batch: &Array2<f64>, labels: &[usize]) -> Result<SupervisedLoss> {
    let k = d.output_dim() - 1;
    check_labels(labels, k)?;
    if batch.nrows() != labels.len() {
        return Err(Error::DimMismatch("batch/labels length mismatch".into()));
    }
    let trace = d.forward(batch)?;
    let logits = trace.logits();
    let b = batch.nrows();
    let mut per_example = Vec::with_capacity(b);
    let mut grad_logits = Array2::zeros((b, k + 1));
    for i in 0..b {
        let row: Vec<f64> = logits.row(i).to_vec();
        let p = softmax(&row);
        let denom = (1.0 - p[k]).max(LOG_CLAMP);
        per_example.push(-(p[labels[i]] / denom).max(LOG_CLAMP).ln());
        // gradient via the softmax-over-first-K identity: zero on the fake logit
        let real_sm = softmax(&row[..k]);
        for j in 0..k {
            grad_logits[[i, j]] =
                (real_sm[j] - if j == labels[i] { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    let (grads, _) = d.backward(&trace, &grad_logits)?;
    Ok(SupervisedLoss { per_example, grads })
}

/// Per-example supervised losses without computing gradients.
pub fn supervised_losses_only(
    d: &DenseNet,
    batch: &Array2<f64>,
    labels: &[usize],
) -> Result<Vec<f64>> {
    let k = d.output_dim() - 1;
    check_labels(labels, k)?;
    let (real, _) = real_class_probs(d, batch)?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -real[[i, y]].max(LOG_CLAMP).ln())
        .collect())
}

/// `-E_real log(1 - p_fake) - E_gen log(p_fake)`.
pub fn unsupervised_loss(
    d: &DenseNet,
    real_batch: &Array2<f64>,
    gen_batch: &Array2<f64>,
) -> Result<(f64, ParamGrads)> {
    if real_batch.ncols() != gen_batch.ncols() {
        return Err(Error::DimMismatch("real/generated width mismatch".into()));
    }
    let k = d.output_dim() - 1;
    let mut total = 0.0;
    let mut grads = ParamGrads::zeros_like(d);

    // real term: -log(1 - p_fake)
    {
        let trace = d.forward(real_batch)?;
        let logits = trace.logits();
        let b = real_batch.nrows();
        let mut grad_logits = Array2::zeros((b, k + 1));
        for i in 0..b {
            let row: Vec<f64> = logits.row(i).to_vec();
            let p = softmax(&row);
            total += -(1.0 - p[k]).max(LOG_CLAMP).ln() / b as f64;
            let real_sm = softmax(&row[..k]);
            for j in 0..k {
                grad_logits[[i, j]] = (p[j] - real_sm[j]) / b as f64;
            }
            grad_logits[[i, k]] = p[k] / b as f64;
        }
        let (g, _) = d.backward(&trace, &grad_logits)?;
        grads.add_scaled(&g, 1.0);
    }

    // generated term: -log(p_fake)
    {
        let trace = d.forward(gen_batch)?;
        let logits = trace.logits();
        let b = gen_batch.nrows();
        let mut grad_logits = Array2::zeros((b, k + 1));
        for i in 0..b {
            let row: Vec<f64> = logits.row(i).to_vec();
            let p = softmax(&row);
            total += -p[k].max(LOG_CLAMP).ln() / b as f64;
            for j in 0..=k {
                grad_logits[[i, j]] = (p[j] - if j == k { 1.0 } else { 0.0 }) / b as f64;
            }
        }
        let (g, _) = d.backward(&trace, &grad_logits)?;
        grads.add_scaled(&g, 1.0);
    }

    Ok((total, grads))
}

fn feature_layer(d: &DenseNet) -> usize {
    // penultimate activation: the last hidden layer before the logits
    d.num_layers() - 2
}

fn mean_rows(a: &Array2<f64>) -> Array1<f64> {
    a.mean_axis(Axis(0)).expect("non-empty batch")
}

/// Mean (over discriminators) squared distance between average real and
/// average generated penultimate features. Gradients flow only into the
/// generator; discriminator parameters are treated as constants.
pub fn feature_matching_loss(
    g: &DenseNet,
    discriminators: &[&DenseNet],
    real_batch: &Array2<f64>,
    latent_batch: &Array2<f64>,
) -> Result<(f64, ParamGrads)> {
    if discriminators.is_empty() {
        return Err(Error::InvalidArgument("need at least one discriminator".into()));
    }
    let g_trace = g.forward(latent_batch)?;
    let fake = g_trace.logits().clone();
    let n_d = discriminators.len() as f64;
    let b_fake = fake.nrows() as f64;

    let mut loss = 0.0;
    let mut grad_fake: Array2<f64> = Array2::zeros(fake.dim());
    for d in discriminators {
        let layer = feature_layer(d);
        let real_trace = d.forward(real_batch)?;
        let fake_trace = d.forward(&fake)?;
        let m_real = mean_rows(real_trace.activation(layer));
        let m_fake = mean_rows(fake_trace.activation(layer));
        let diff = &m_real - &m_fake;
        loss += diff.iter().map(|v| v * v).sum::<f64>() / n_d;
        // d loss / d m_fake = -2 diff / n_d; spread uniformly over the batch mean
        let upstream_row = diff.mapv(|v| -2.0 * v / (n_d * b_fake));
        let mut upstream = Array2::zeros(fake_trace.activation(layer).dim());
        for mut r in upstream.axis_iter_mut(Axis(0)) {
            r.assign(&upstream_row);
        }
        let (_, grad_input) = d.backward_from_layer(&fake_trace, layer, &upstream)?;
        grad_fake += &grad_input;
    }

    let (g_grads, _) = g.backward(&g_trace, &grad_fake)?;
    Ok((loss, g_grads))
}

/// Which optimizer a trainer uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Optimizer state bound to one net.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub kind: OptimizerKind,
    pub eta: f64,
    adam: AdamState,
}

impl Trainer {
    pub fn new(net: &DenseNet, kind: OptimizerKind, eta: f64) -> Self {
        Trainer {
            kind,
            eta,
            adam: AdamState::new(net),
        }
    }

    pub fn step(&mut self, net: &mut DenseNet, grads: &ParamGrads) -> Result<()> {
        match self.kind {
            OptimizerKind::Sgd => net.sgd_step(grads, self.eta),
            OptimizerKind::Adam => net.adam_step(grads, &mut self.adam, self.eta),
        }
    }
}

/// Optimizer states for a whole student model.
#[derive(Debug, Clone)]
pub struct StudentTrainers {
    pub d1: Trainer,
    pub d2: Trainer,
    pub g: Trainer,
}

impl StudentTrainers {
    pub fn new(model: &StudentModel, kind: OptimizerKind, eta: f64) -> Self {
        StudentTrainers {
            d1: Trainer::new(&model.d1, kind, eta),
            d2: Trainer::new(&model.d2, kind, eta),
            g: Trainer::new(&model.g, kind, eta),
        }
    }
}

/// One plain (baseline) update: D1 takes the supervised + unsupervised step,
/// G steps on feature matching against D1 alone, D2 is untouched.
pub fn train_step_plain(
    model: &mut StudentModel,
    trainers: &mut StudentTrainers,
    labeled_batch: &Array2<f64>,
    labels: &[usize],
    unlabeled_batch: &Array2<f64>,
    rng: &mut Rng,
) -> Result<LossBundle> {
    let z = sample_latent(unlabeled_batch.nrows().max(1), model.latent_dim, rng);
    let gen_batch = generate(&model.g, &z)?;

    let sup = supervised_loss(&model.d1, labeled_batch, labels)?;
    let (unsup, unsup_grads) = unsupervised_loss(&model.d1, unlabeled_batch, &gen_batch)?;
    let mut grads = sup.grads.clone();
    grads.add_scaled(&unsup_grads, 1.0);
    trainers.d1.step(&mut model.d1, &grads)?;

    let (fm, g_grads) = feature_matching_loss(&model.g, &[&model.d1], unlabeled_batch, &z)?;
    trainers.g.step(&mut model.g, &g_grads)?;

    Ok(LossBundle {
        supervised: sup.per_example.iter().sum::<f64>() / sup.per_example.len().max(1) as f64,
        unsupervised: unsup,
        feature_matching: fm,
    })
}
