//! Small feed-forward classifier trained with mini-batch SGD.
//!
//! Parameters live in one flat [`ParameterVector`]: for each layer, the
//! weight matrix row-major (fan_out x fan_in) followed by the bias. A
//! client's round update is the pseudo-gradient `delta = w_in - w_out`, so
//! the server step `w - eta * delta` descends and a sign-flipped delta
//! literally reverses the learning direction.
//!
//! Hidden activations are ReLU with optional inverted dropout (training
//! passes only, one seeded mask per batch). The loss is softmax
//! cross-entropy evaluated in log-space.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::vectors::ParameterVector;

/// Shape of the classifier. `dropout_rates` aligns with `hidden_dims`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelLayout {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub dropout_rates: Vec<f64>,
}

impl ModelLayout {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize) -> Self {
        let dropout_rates = vec![0.0; hidden_dims.len()];
        Self {
            input_dim,
            hidden_dims,
            output_dim,
            dropout_rates,
        }
    }

    pub fn with_dropout(mut self, rates: Vec<f64>) -> Self {
        self.dropout_rates = rates;
        self
    }

    /// Chain of (fan_in, fan_out) pairs from input to output.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut fan_in = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in, self.output_dim));
        dims
    }

    /// Total parameter count p = sum over layers of fan_in*fan_out + fan_out.
    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|&(m, n)| m * n + n)
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("model.input_dim", "must be at least 1"));
        }
        if self.output_dim < 2 {
            return Err(Error::config("model.output_dim", "must be at least 2"));
        }
        if self.hidden_dims.iter().any(|&h| h == 0) {
            return Err(Error::config("model.hidden_dims", "layer widths must be at least 1"));
        }
        if self.dropout_rates.len() != self.hidden_dims.len() {
            return Err(Error::config(
                "model.dropout_rates",
                "must align one-to-one with hidden_dims",
            ));
        }
        if self.dropout_rates.iter().any(|&r| !(0.0..1.0).contains(&r)) {
            return Err(Error::config("model.dropout_rates", "rates must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingHyperparams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl TrainingHyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("hyper.learning_rate", "must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("hyper.batch_size", "must be at least 1"));
        }
        if self.local_epochs == 0 {
            return Err(Error::config("hyper.local_epochs", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("hyper.momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("hyper.weight_decay", "must be >= 0"));
        }
        Ok(())
    }
}

/// One client's round contribution: `delta = global - locally_trained`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientUpdate {
    pub client_id: usize,
    pub round: u32,
    pub delta: ParameterVector,
}

struct LayerView {
    w_off: usize,
    b_off: usize,
    fan_in: usize,
    fan_out: usize,
}

fn layer_views(layout: &ModelLayout) -> Vec<LayerView> {
    let mut views = Vec::new();
    let mut off = 0;
    for (fan_in, fan_out) in layout.layer_dims() {
        views.push(LayerView {
            w_off: off,
            b_off: off + fan_in * fan_out,
            fan_in,
            fan_out,
        });
        off += fan_in * fan_out + fan_out;
    }
    views
}

/// Deterministic initialization: weights uniform in ±1/sqrt(fan_in),
/// biases exactly zero.
pub fn init_model(layout: &ModelLayout, seed: u64) -> ParameterVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; layout.param_count()];
    for view in layer_views(layout) {
        let bound = 1.0 / (view.fan_in as f64).sqrt();
        for w in &mut values[view.w_off..view.w_off + view.fan_in * view.fan_out] {
            *w = rng.random_range(-bound..bound);
        }
        // biases stay zero
    }
    ParameterVector::new(values)
}

fn affine(params: &[f64], view: &LayerView, input: &[f64], out: &mut [f64]) {
    for i in 0..view.fan_out {
        let row = &params[view.w_off + i * view.fan_in..view.w_off + (i + 1) * view.fan_in];
        let mut acc = params[view.b_off + i];
        for (w, x) in row.iter().zip(input) {
            acc += w * x;
        }
        out[i] = acc;
    }
}

/// Class scores for one feature row (evaluation mode: dropout disabled).
pub fn forward(params: &ParameterVector, layout: &ModelLayout, features: &[f64]) -> Result<Vec<f64>> {
    if features.len() != layout.input_dim {
        return Err(Error::DimensionMismatch {
            expected: layout.input_dim,
            got: features.len(),
        });
    }
    if params.len() != layout.param_count() {
        return Err(Error::DimensionMismatch {
            expected: layout.param_count(),
            got: params.len(),
        });
    }
    let views = layer_views(layout);
    let p = params.as_slice();
    let mut activation = features.to_vec();
    for (l, view) in views.iter().enumerate() {
        let mut z = vec![0.0; view.fan_out];
        affine(p, view, &activation, &mut z);
        if l + 1 < views.len() {
            for v in &mut z {
                *v = v.max(0.0);
            }
        }
        activation = z;
    }
    Ok(activation)
}

fn log_sum_exp(scores: &[f64]) -> f64 {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln()
}

/// Mean cross-entropy of the dataset under `params` (evaluation mode).
pub fn mean_loss(params: &ParameterVector, layout: &ModelLayout, dataset: &LabeledDataset) -> Result<f64> {
    if dataset.len() == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for i in 0..dataset.len() {
        let scores = forward(params, layout, dataset.row(i))?;
        let y = dataset.label(i);
        if y >= layout.output_dim {
            return Err(Error::DimensionMismatch {
                expected: layout.output_dim,
                got: y,
            });
        }
        total += log_sum_exp(&scores) - scores[y];
    }
    Ok(total / dataset.len() as f64)
}

/// Per-layer dropout masks for one batch. Entries are 0 or 1/(1-rate)
/// (inverted dropout); `None` for layers with rate 0.
fn draw_masks(layout: &ModelLayout, rng: &mut ChaCha8Rng) -> Vec<Option<Vec<f64>>> {
    layout
        .hidden_dims
        .iter()
        .zip(&layout.dropout_rates)
        .map(|(&width, &rate)| {
            if rate == 0.0 {
                None
            } else {
                let keep = 1.0 - rate;
                Some(
                    (0..width)
                        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { 1.0 / keep })
                        .collect(),
                )
            }
        })
        .collect()
}

/// Accumulates the mean gradient of the batch into `grad` (overwritten).
fn batch_gradient(
    params: &[f64],
    layout: &ModelLayout,
    views: &[LayerView],
    shard: &LabeledDataset,
    batch: &[usize],
    masks: &[Option<Vec<f64>>],
    grad: &mut [f64],
) {
    grad.fill(0.0);
    let n_layers = views.len();
    for &sample in batch {
        let x = shard.row(sample);
        let y = shard.label(sample);

        // Forward with caches. activations[l] is the input to layer l.
        let mut activations: Vec<Vec<f64>> = Vec::with_capacity(n_layers + 1);
        activations.push(x.to_vec());
        let mut relu_active: Vec<Vec<bool>> = Vec::with_capacity(n_layers - 1);
        for (l, view) in views.iter().enumerate() {
            let mut z = vec![0.0; view.fan_out];
            affine(params, view, &activations[l], &mut z);
            if l + 1 < n_layers {
                relu_active.push(z.iter().map(|&v| v > 0.0).collect());
                for v in &mut z {
                    *v = v.max(0.0);
                }
                if let Some(mask) = &masks[l] {
                    for (v, m) in z.iter_mut().zip(mask) {
                        *v *= m;
                    }
                }
            }
            activations.push(z);
        }

        // dL/dlogits = softmax - onehot
        let logits = &activations[n_layers];
        let lse = log_sum_exp(logits);
        let mut dz: Vec<f64> = logits.iter().map(|&s| (s - lse).exp()).collect();
        dz[y] -= 1.0;

        // Backward through the chain.
        for l in (0..n_layers).rev() {
            let view = &views[l];
            let input = &activations[l];
            for i in 0..view.fan_out {
                let g = dz[i];
                let row = &mut grad[view.w_off + i * view.fan_in..view.w_off + (i + 1) * view.fan_in];
                for (gw, a) in row.iter_mut().zip(input) {
                    *gw += g * a;
                }
                grad[view.b_off + i] += g;
            }
            if l == 0 {
                break;
            }
            let mut da = vec![0.0; view.fan_in];
            for i in 0..view.fan_out {
                let g = dz[i];
                let row = &params[view.w_off + i * view.fan_in..view.w_off + (i + 1) * view.fan_in];
                for (d, w) in da.iter_mut().zip(row) {
                    *d += g * w;
                }
            }
            // Gradient through dropout, then ReLU, of the previous layer.
            if let Some(mask) = &masks[l - 1] {
                for (d, m) in da.iter_mut().zip(mask) {
                    *d *= m;
                }
            }
            for (d, &active) in da.iter_mut().zip(&relu_active[l - 1]) {
                if !active {
                    *d = 0.0;
                }
            }
            dz = da;
        }
    }
    let inv = 1.0 / batch.len() as f64;
    for g in grad.iter_mut() {
        *g *= inv;
    }
}

/// Local training: `local_epochs` of seeded mini-batch SGD with momentum
/// and weight decay starting from `global_params`. Returns the
/// pseudo-gradient `delta = global_params - final_params`.
pub fn local_train(
    client_id: usize,
    round: u32,
    global_params: &ParameterVector,
    layout: &ModelLayout,
    shard: &LabeledDataset,
    hyper: &TrainingHyperparams,
    seed: u64,
) -> Result<GradientUpdate> {
    if shard.len() == 0 {
        return Err(Error::EmptyShard);
    }
    let p = layout.param_count();
    if global_params.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: global_params.len(),
        });
    }
    if shard.dim() != layout.input_dim {
        return Err(Error::DimensionMismatch {
            expected: layout.input_dim,
            got: shard.dim(),
        });
    }
    if let Some(&y) = shard.labels().iter().find(|&&y| y >= layout.output_dim) {
        return Err(Error::DimensionMismatch {
            expected: layout.output_dim,
            got: y,
        });
    }

    let views = layer_views(layout);
    let mut w = global_params.clone().into_values();
    let mut velocity = vec![0.0; p];
    let mut grad = vec![0.0; p];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..shard.len()).collect();

    for _ in 0..hyper.local_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(hyper.batch_size) {
            let masks = draw_masks(layout, &mut rng);
            batch_gradient(&w, layout, &views, shard, batch, &masks, &mut grad);
            for k in 0..p {
                let g = grad[k] + hyper.weight_decay * w[k];
                velocity[k] = hyper.momentum * velocity[k] + g;
                w[k] -= hyper.learning_rate * velocity[k];
            }
        }
    }

    let delta: Vec<f64> = global_params
        .as_slice()
        .iter()
        .zip(&w)
        .map(|(g, f)| g - f)
        .collect();
    Ok(GradientUpdate {
        client_id,
        round,
        delta: ParameterVector::new(delta),
    })
}

/// Accuracy and the K x K confusion matrix (`confusion[true][predicted]`).
/// Prediction is argmax with lowest-index tie-break.
pub fn evaluate(
    params: &ParameterVector,
    layout: &ModelLayout,
    dataset: &LabeledDataset,
) -> Result<(f64, Vec<Vec<u64>>)> {
    if dataset.len() == 0 {
        return Err(Error::EmptyDataset);
    }
    let k = layout.output_dim;
    let mut confusion = vec![vec![0u64; k]; k];
    for i in 0..dataset.len() {
        let scores = forward(params, layout, dataset.row(i))?;
        let y = dataset.label(i);
        if y >= k {
            return Err(Error::DimensionMismatch { expected: k, got: y });
        }
        let mut best = 0;
        for (j, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = j;
            }
        }
        confusion[y][best] += 1;
    }
    let correct: u64 = (0..k).map(|i| confusion[i][i]).sum();
    let total: u64 = confusion.iter().flatten().sum();
    Ok((correct as f64 / total as f64, confusion))
}
