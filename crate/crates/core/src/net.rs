//! Dense feed-forward network engine.
//!
//! Every trainable model in the pipeline (teachers, the two student
//! discriminators, the generator) is a [`DenseNet`]: a stack of affine layers
//! with a fixed activation vocabulary. The forward pass records all
//! intermediates in a [`ForwardTrace`]; the backward pass chains analytic
//! gradients in reverse and also yields the gradient with respect to the
//! input batch, which the generator needs when its samples flow through a
//! discriminator.
//!
//! All arithmetic is f64. Batches are row-major `[B x dim]`.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Activation vocabulary. `LeakyRelu` uses the fixed slope 0.2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu,
    Tanh,
}

const LEAKY_SLOPE: f64 = 0.2;

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::LeakyRelu => {
                if z >= 0.0 {
                    z
                } else {
                    LEAKY_SLOPE * z
                }
            }
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative as a function of the pre-activation `z`.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if z >= 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

/// One dense layer: `a = act(x W^T + b)`, weights `[out x in]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

/// A dense feed-forward network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseNet {
    layers: Vec<Layer>,
    input_dim: usize,
}

/// Per-layer intermediates recorded by [`DenseNet::forward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// The input batch, needed for the first layer's weight gradient.
    input: Array2<f64>,
    /// Pre-activations `z` per layer.
    pre: Vec<Array2<f64>>,
    /// Activations `a` per layer; the last entry is the logits.
    post: Vec<Array2<f64>>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Array2<f64> {
        self.post.last().expect("trace has at least one layer")
    }

    /// Activation output of layer `i` (0-based).
    pub fn activation(&self, i: usize) -> &Array2<f64> {
        &self.post[i]
    }

    pub fn batch_size(&self) -> usize {
        self.input.nrows()
    }
}

/// Gradients shape-congruent to a [`DenseNet`].
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl ParamGrads {
    pub fn zeros_like(net: &DenseNet) -> Self {
        ParamGrads {
            layers: net
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.weights.dim()), Array1::zeros(l.bias.len())))
                .collect(),
        }
    }

    /// `self += other * scale`.
    pub fn add_scaled(&mut self, other: &ParamGrads, scale: f64) {
        assert_eq!(self.layers.len(), other.layers.len());
        for ((gw, gb), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            gw.scaled_add(scale, ow);
            gb.scaled_add(scale, ob);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|(gw, gb)| gw.iter().all(|v| v.is_finite()) && gb.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|(gw, gb)| gw.iter().chain(gb.iter()))
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Adam accumulators, shape-congruent to the owning net.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<(Array2<f64>, Array1<f64>)>,
    v: Vec<(Array2<f64>, Array1<f64>)>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Fresh state with the universal defaults (0.9, 0.999, 1e-8).
    pub fn new(net: &DenseNet) -> Self {
        let zeros = |net: &DenseNet| {
            net.layers
                .iter()
                .map(|l| (Array2::zeros(l.weights.dim()), Array1::zeros(l.bias.len())))
                .collect::<Vec<_>>()
        };
        AdamState {
            m: zeros(net),
            v: zeros(net),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl DenseNet {
    /// Builds a net with Xavier-uniform weights drawn from `rng`.
    ///
    /// `shape` lists `(width, activation)` per layer; the last layer usually
    /// carries `Identity` so its output can be read as logits.
    pub fn new(input_dim: usize, shape: &[(usize, Activation)], rng: &mut Rng) -> Self {
        assert!(input_dim > 0 && !shape.is_empty());
        let mut layers = Vec::with_capacity(shape.len());
        let mut fan_in = input_dim;
        for &(width, activation) in shape {
            let limit = (6.0 / (fan_in + width) as f64).sqrt();
            let weights =
                Array2::from_shape_fn((width, fan_in), |_| rng.uniform_in(-limit, limit));
            layers.push(Layer {
                weights,
                bias: Array1::zeros(width),
                activation,
            });
            fan_in = width;
        }
        DenseNet { layers, input_dim }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty net").bias.len()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Flat copy of all parameters, layer by layer, weights row-major then bias.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weights.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }

    /// Inverse of [`Self::flatten_params`].
    pub fn set_params(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            for w in l.weights.iter_mut() {
                *w = it.next().expect("flat param vector too short");
            }
            for b in l.bias.iter_mut() {
                *b = it.next().expect("flat param vector too short");
            }
        }
        assert!(it.next().is_none(), "flat param vector too long");
    }

    pub fn params_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite()))
    }

    pub fn forward(&self, batch: &Array2<f64>) -> Result<ForwardTrace> {
        if batch.ncols() != self.input_dim {
            return Err(Error::DimMismatch(format!(
                "batch width {} != input_dim {}",
                batch.ncols(),
                self.input_dim
            )));
        }
        if batch.nrows() == 0 {
            return Err(Error::DimMismatch("empty batch".into()));
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len());
        let mut x = batch.clone();
        for layer in &self.layers {
            let z = x.dot(&layer.weights.t()) + &layer.bias;
            let a = z.mapv(|v| layer.activation.apply(v));
            pre.push(z);
            post.push(a.clone());
            x = a;
        }
        Ok(ForwardTrace {
            input: batch.clone(),
            pre,
            post,
        })
    }

    /// Reverse-chains `grad_logits` through the net.
    ///
    /// Returns the parameter gradients and the gradient with respect to the
    /// input batch.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        grad_logits: &Array2<f64>,
    ) -> Result<(ParamGrads, Array2<f64>)> {
        if trace.pre.len() != self.layers.len()
            || trace.input.ncols() != self.input_dim
            || grad_logits.dim() != trace.logits().dim()
        {
            return Err(Error::DimMismatch(
                "trace/gradient incompatible with this net".into(),
            ));
        }
        self.backward_from_layer(trace, self.layers.len() - 1, grad_logits)
    }

    /// Backward pass starting from the activation output of layer `from`
    /// (inclusive) down to the input. Used by feature matching, where the
    /// upstream gradient lands on an intermediate activation.
    pub fn backward_from_layer(
        &self,
        trace: &ForwardTrace,
        from: usize,
        grad_activation: &Array2<f64>,
    ) -> Result<(ParamGrads, Array2<f64>)> {
        if grad_activation.dim() != trace.post[from].dim() {
            return Err(Error::DimMismatch(
                "gradient shape does not match the layer activation".into(),
            ));
        }
        let mut grads = ParamGrads::zeros_like(self);
        let mut upstream = grad_activation.clone();
        for i in (0..=from).rev() {
            let layer = &self.layers[i];
            // delta = upstream * act'(z)
            let delta = &upstream * &trace.pre[i].mapv(|z| layer.activation.derivative(z));
            let layer_in = if i == 0 {
                &trace.input
            } else {
                &trace.post[i - 1]
            };
            grads.layers[i].0 = delta.t().dot(layer_in);
            grads.layers[i].1 = delta.sum_axis(Axis(0));
            upstream = delta.dot(&layer.weights);
        }
        Ok((grads, upstream))
    }

    /// Plain gradient descent: `w -= eta * g`.
    pub fn sgd_step(&mut self, grads: &ParamGrads, eta: f64) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradients passed to sgd_step".into()));
        }
        for (layer, (gw, gb)) in self.layers.iter_mut().zip(&grads.layers) {
            layer.weights.scaled_add(-eta, gw);
            layer.bias.scaled_add(-eta, gb);
        }
        Ok(())
    }

    /// Adam with bias correction; increments `state.t` by exactly one.
    pub fn adam_step(&mut self, grads: &ParamGrads, state: &mut AdamState, eta: f64) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradients passed to adam_step".into()));
        }
        state.t += 1;
        let b1 = state.beta1;
        let b2 = state.beta2;
        let bc1 = 1.0 - b1.powi(state.t as i32);
        let bc2 = 1.0 - b2.powi(state.t as i32);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let (gw, gb) = &grads.layers[i];
            let (mw, mb) = &mut state.m[i];
            let (vw, vb) = &mut state.v[i];
            azip_update(&mut layer.weights, gw, mw, vw, b1, b2, bc1, bc2, eta, state.eps);
            for j in 0..layer.bias.len() {
                let g = gb[j];
                mb[j] = b1 * mb[j] + (1.0 - b1) * g;
                vb[j] = b2 * vb[j] + (1.0 - b2) * g * g;
                let mhat = mb[j] / bc1;
                let vhat = vb[j] / bc2;
                layer.bias[j] -= eta * mhat / (vhat.sqrt() + state.eps);
            }
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn azip_update(
    w: &mut Array2<f64>,
    g: &Array2<f64>,
    m: &mut Array2<f64>,
    v: &mut Array2<f64>,
    b1: f64,
    b2: f64,
    bc1: f64,
    bc2: f64,
    eta: f64,
    eps: f64,
) {
    ndarray::Zip::from(w).and(g).and(m).and(v).for_each(|w, &g, m, v| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let mhat = *m / bc1;
        let vhat = *v / bc2;
        *w -= eta * mhat / (vhat.sqrt() + eps);
    });
}

/// Numerically stable softmax (max-subtraction).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Log arguments are clamped below at this value throughout the crate.
pub const LOG_CLAMP: f64 = 1e-12;

/// Cross-entropy against a hard label; also returns the gradient with respect
/// to the logits (`p - onehot`).
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= probs.len() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            probs.len()
        )));
    }
    let loss = -probs[label].max(LOG_CLAMP).ln();
    let grad = probs
        .iter()
        .enumerate()
        .map(|(j, &p)| p - if j == label { 1.0 } else { 0.0 })
        .collect();
    Ok((loss, grad))
}
