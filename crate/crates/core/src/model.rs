//! Dense feed-forward network engine.
//!
//! A [`Model`] is a flat parameter vector plus its layer widths. Hidden layers
//! use ReLU, the output layer produces raw logits and training minimizes
//! softmax cross-entropy with plain mini-batch SGD.
//!
//! # Parameter layout
//!
//! For every layer `l` (mapping `in_l -> out_l`) the vector holds the weight
//! matrix in row-major `(out_l, in_l)` order followed by the `out_l` biases.
//! Layers are stored back to back from input to output, so the total length
//! is `sum(in_l * out_l + out_l)`.
//!
//! # Checkpoint format
//!
//! `4 x u64` little-endian layer widths (input, hidden1, hidden2, output)
//! followed by every parameter as a little-endian `f64`, in the layout above.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row access to labelled samples, implemented by whole datasets, client
/// views and ad-hoc batches.
pub trait Samples {
    fn len(&self) -> usize;
    fn dim(&self) -> usize;
    fn features(&self, i: usize) -> &[f64];
    fn label(&self, i: usize) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A small owned set of `(x, y)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
}

impl Batch {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Precondition("batch must hold at least one sample".into()));
        }
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(Error::Config(format!(
                "batch features hold {} values, expected {} rows x {dim}",
                features.len(),
                labels.len()
            )));
        }
        Ok(Self { features, labels, dim })
    }

    /// Copies the selected rows of `data` into a batch.
    pub fn gather<S: Samples + ?Sized>(data: &S, indices: &[usize]) -> Result<Self> {
        let dim = data.dim();
        let mut features = Vec::with_capacity(indices.len() * dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(data.features(i));
            labels.push(data.label(i));
        }
        Self::new(features, labels, dim)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn raw_features(&self) -> &[f64] {
        &self.features
    }
}

impl Samples for Batch {
    fn len(&self) -> usize {
        self.labels.len()
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn features(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
    fn label(&self, i: usize) -> usize {
        self.labels[i]
    }
}

/// Row-major real matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    layer_dims: Vec<usize>,
    params: Vec<f64>,
}

/// `Δw`: a parameter-space update aligned with [`Model::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelDelta(pub Vec<f64>);

impl ModelDelta {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    w: usize,
    b: usize,
    fan_in: usize,
    fan_out: usize,
}

impl Model {
    pub fn num_params(layer_dims: &[usize]) -> usize {
        layer_dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn check_dims(layer_dims: &[usize]) -> Result<()> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::Config(format!(
                "layer widths must be at least two positive integers, got {layer_dims:?}"
            )));
        }
        Ok(())
    }

    pub fn zeros(layer_dims: &[usize]) -> Result<Self> {
        Self::check_dims(layer_dims)?;
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            params: vec![0.0; Self::num_params(layer_dims)],
        })
    }

    /// Glorot-uniform weights and zero biases drawn from `seed`.
    pub fn init(layer_dims: &[usize], seed: u64) -> Result<Self> {
        let mut model = Self::zeros(layer_dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in model.layers() {
            let limit = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
            for w in &mut model.params[layer.w..layer.b] {
                *w = rng.random_range(-limit..limit);
            }
        }
        Ok(model)
    }

    pub fn from_params(layer_dims: &[usize], params: Vec<f64>) -> Result<Self> {
        Self::check_dims(layer_dims)?;
        let expected = Self::num_params(layer_dims);
        if params.len() != expected {
            return Err(Error::Config(format!(
                "expected {expected} parameters for {layer_dims:?}, got {}",
                params.len()
            )));
        }
        if let Some(i) = params.iter().position(|p| !p.is_finite()) {
            return Err(Error::Domain(format!("parameter {i} is not finite")));
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            params,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn into_params(self) -> Vec<f64> {
        self.params
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    fn layers(&self) -> Vec<Layer> {
        let mut offset = 0;
        self.layer_dims
            .windows(2)
            .map(|w| {
                let layer = Layer {
                    w: offset,
                    b: offset + w[0] * w[1],
                    fan_in: w[0],
                    fan_out: w[1],
                };
                offset = layer.b + w[1];
                layer
            })
            .collect()
    }

    /// `self - base`.
    pub fn delta_from(&self, base: &Model) -> Result<ModelDelta> {
        if self.layer_dims != base.layer_dims {
            return Err(Error::Config(format!(
                "cannot diff {:?} against {:?}",
                self.layer_dims, base.layer_dims
            )));
        }
        Ok(ModelDelta(
            self.params
                .iter()
                .zip(&base.params)
                .map(|(a, b)| a - b)
                .collect(),
        ))
    }

    /// Runs the network over `n` rows of `x`, returning every layer's output
    /// (post-ReLU for hidden layers, raw logits for the last).
    fn activations(&self, x: &[f64], n: usize) -> Vec<Vec<f64>> {
        let layers = self.layers();
        let last = layers.len() - 1;
        let mut outs: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
        for (li, layer) in layers.iter().enumerate() {
            let input: &[f64] = if li == 0 { x } else { &outs[li - 1] };
            let w = &self.params[layer.w..layer.b];
            let b = &self.params[layer.b..layer.b + layer.fan_out];
            let mut out = vec![0.0; n * layer.fan_out];
            for r in 0..n {
                let xr = &input[r * layer.fan_in..(r + 1) * layer.fan_in];
                let orow = &mut out[r * layer.fan_out..(r + 1) * layer.fan_out];
                for (j, o) in orow.iter_mut().enumerate() {
                    let wr = &w[j * layer.fan_in..(j + 1) * layer.fan_in];
                    let z = b[j] + dot(wr, xr);
                    *o = if li < last { z.max(0.0) } else { z };
                }
            }
            outs.push(out);
        }
        outs
    }

    pub(crate) fn check_input<S: Samples + ?Sized>(&self, data: &S) -> Result<()> {
        if data.dim() != self.input_dim() {
            return Err(Error::Config(format!(
                "sample dimension {} does not match model input {}",
                data.dim(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Mean cross-entropy over `labels.len()` rows of `x` and its gradient.
    pub(crate) fn loss_and_grad(&self, x: &[f64], labels: &[usize]) -> (f64, Vec<f64>) {
        let n = labels.len();
        let layers = self.layers();
        let acts = self.activations(x, n);
        let classes = self.output_dim();
        let logits = acts.last().unwrap();

        let mut delta = vec![0.0; n * classes];
        let mut loss = 0.0;
        let inv_n = 1.0 / n as f64;
        for r in 0..n {
            let z = &logits[r * classes..(r + 1) * classes];
            let d = &mut delta[r * classes..(r + 1) * classes];
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (dj, &zj) in d.iter_mut().zip(z) {
                *dj = (zj - max).exp();
                sum += *dj;
            }
            loss += sum.ln() + max - z[labels[r]];
            for dj in d.iter_mut() {
                *dj *= inv_n / sum;
            }
            d[labels[r]] -= inv_n;
        }
        loss *= inv_n;

        let mut grad = vec![0.0; self.params.len()];
        for li in (0..layers.len()).rev() {
            let layer = layers[li];
            let input: &[f64] = if li == 0 { x } else { &acts[li - 1] };
            let (gw, gb) = grad[layer.w..layer.b + layer.fan_out].split_at_mut(layer.b - layer.w);
            for r in 0..n {
                let xr = &input[r * layer.fan_in..(r + 1) * layer.fan_in];
                let dr = &delta[r * layer.fan_out..(r + 1) * layer.fan_out];
                for (j, &dj) in dr.iter().enumerate() {
                    if dj == 0.0 {
                        continue;
                    }
                    gb[j] += dj;
                    axpy(dj, xr, &mut gw[j * layer.fan_in..(j + 1) * layer.fan_in]);
                }
            }
            if li == 0 {
                break;
            }
            let w = &self.params[layer.w..layer.b];
            let mut prev = vec![0.0; n * layer.fan_in];
            for r in 0..n {
                let dr = &delta[r * layer.fan_out..(r + 1) * layer.fan_out];
                let pr = &mut prev[r * layer.fan_in..(r + 1) * layer.fan_in];
                for (j, &dj) in dr.iter().enumerate() {
                    if dj != 0.0 {
                        axpy(dj, &w[j * layer.fan_in..(j + 1) * layer.fan_in], pr);
                    }
                }
                let ar = &input[r * layer.fan_in..(r + 1) * layer.fan_in];
                for (p, &a) in pr.iter_mut().zip(ar) {
                    if a <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            delta = prev;
        }
        (loss, grad)
    }

    /// Mean cross-entropy of the model on a batch.
    pub fn batch_loss(&self, batch: &Batch) -> Result<f64> {
        self.check_input(batch)?;
        self.check_labels(batch)?;
        let (loss, _) = self.loss_and_grad(&batch.features, &batch.labels);
        Ok(loss)
    }

    /// Analytic gradient of [`Model::batch_loss`].
    pub fn gradient(&self, batch: &Batch) -> Result<Vec<f64>> {
        self.check_input(batch)?;
        self.check_labels(batch)?;
        Ok(self.loss_and_grad(&batch.features, &batch.labels).1)
    }

    pub(crate) fn check_labels<S: Samples + ?Sized>(&self, data: &S) -> Result<()> {
        let classes = self.output_dim();
        for i in 0..data.len() {
            if data.label(i) >= classes {
                return Err(Error::Config(format!(
                    "label {} at row {i} exceeds model output width {classes}",
                    data.label(i)
                )));
            }
        }
        Ok(())
    }

    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        if self.layer_dims.len() != 4 {
            return Err(Error::Config(format!(
                "checkpoints hold exactly four layer widths, model has {:?}",
                self.layer_dims
            )));
        }
        for &d in &self.layer_dims {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for p in &self.params {
            out.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        if bytes.len() < 32 {
            return Err(Error::Parse {
                offset: bytes.len(),
                msg: "checkpoint header needs 32 bytes".into(),
            });
        }
        let dims: Vec<usize> = bytes[..32]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        Self::check_dims(&dims)?;
        let expected = Self::num_params(&dims);
        let body = &bytes[32..];
        if body.len() != expected * 8 {
            return Err(Error::Parse {
                offset: 32 + body.len().min(expected * 8),
                msg: format!("expected {expected} f64 parameters, found {} bytes", body.len()),
            });
        }
        let params = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_params(&dims, params)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent lanes so the loop vectorizes; the order is fixed.
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    let mut acc = [0.0; 4];
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Logits for every row of `batch`.
pub fn forward(model: &Model, batch: &Batch) -> Result<Matrix> {
    model.check_input(batch)?;
    let n = batch.len();
    let data = model.activations(&batch.features, n).pop().unwrap();
    Ok(Matrix {
        rows: n,
        cols: model.output_dim(),
        data,
    })
}

/// Proximal anchor for FedProx-style local training.
#[derive(Debug, Clone, Copy)]
pub struct Proximal<'a> {
    pub anchor: &'a Model,
    pub mu: f64,
}

/// One SGD step on `batch`, optionally with a proximal pull towards an anchor.
pub(crate) fn sgd_step_in_place(
    model: &mut Model,
    batch: &Batch,
    lr: f64,
    prox: Option<Proximal<'_>>,
) -> f64 {
    let (loss, grad) = model.loss_and_grad(&batch.features, &batch.labels);
    match prox {
        Some(p) if p.mu != 0.0 => {
            for ((w, g), a) in model.params.iter_mut().zip(&grad).zip(&p.anchor.params) {
                *w -= lr * (g + p.mu * (*w - a));
            }
        }
        _ => {
            for (w, g) in model.params.iter_mut().zip(&grad) {
                *w -= lr * g;
            }
        }
    }
    loss
}

/// Single plain SGD step.
pub fn sgd_step(model: &Model, batch: &Batch, lr: f64) -> Result<Model> {
    model.check_input(batch)?;
    model.check_labels(batch)?;
    let mut next = model.clone();
    let loss = sgd_step_in_place(&mut next, batch, lr, None);
    if !loss.is_finite() {
        return Err(Error::NonFinite { step: 0 });
    }
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: Model,
    /// Mean mini-batch loss of each epoch, in order.
    pub epoch_losses: Vec<f64>,
}

impl Trained {
    pub fn final_loss(&self) -> f64 {
        *self.epoch_losses.last().unwrap()
    }
}

/// Mini-batch SGD for `epochs` full passes over `data`. Sample order is a
/// fresh Fisher-Yates shuffle per epoch drawn from a stream seeded by `seed`.
pub fn train_epochs<S: Samples + ?Sized>(
    model: &Model,
    data: &S,
    cfg: TrainConfig,
) -> Result<Trained> {
    train_with(model, data, cfg, None)
}

pub fn train_epochs_proximal<S: Samples + ?Sized>(
    model: &Model,
    data: &S,
    cfg: TrainConfig,
    prox: Proximal<'_>,
) -> Result<Trained> {
    if prox.mu < 0.0 || !prox.mu.is_finite() {
        return Err(Error::Precondition(format!("proximal mu must be >= 0, got {}", prox.mu)));
    }
    train_with(model, data, cfg, Some(prox))
}

fn train_with<S: Samples + ?Sized>(
    model: &Model,
    data: &S,
    cfg: TrainConfig,
    prox: Option<Proximal<'_>>,
) -> Result<Trained> {
    if data.is_empty() {
        return Err(Error::Precondition("cannot train on an empty dataset".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Precondition("epochs and batch size must be positive".into()));
    }
    if cfg.lr.is_nan() || cfg.lr < 0.0 {
        return Err(Error::Precondition(format!("learning rate must be >= 0, got {}", cfg.lr)));
    }
    model.check_input(data)?;
    model.check_labels(data)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut current = model.clone();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = Batch::gather(data, chunk)?;
            let loss = sgd_step_in_place(&mut current, &batch, cfg.lr, prox);
            if !loss.is_finite() {
                return Err(Error::NonFinite { step });
            }
            total += loss;
            batches += 1;
            step += 1;
        }
        epoch_losses.push(total / batches as f64);
    }
    if current.params.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite { step });
    }
    Ok(Trained {
        model: current,
        epoch_losses,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

/// Mean cross-entropy and argmax accuracy over every sample.
pub fn evaluate<S: Samples + ?Sized>(model: &Model, data: &S) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Precondition("cannot evaluate on an empty dataset".into()));
    }
    model.check_input(data)?;
    model.check_labels(data)?;
    const CHUNK: usize = 256;
    let classes = model.output_dim();
    let mut loss = 0.0;
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let batch = Batch::gather(data, chunk)?;
        let logits = model.activations(&batch.features, chunk.len()).pop().unwrap();
        for (r, &y) in batch.labels.iter().enumerate() {
            let z = &logits[r * classes..(r + 1) * classes];
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            loss += lse - z[y];
            // first maximal index wins ties
            let pred = z
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0;
            if pred == y {
                correct += 1;
            }
        }
    }
    let n = data.len() as f64;
    Ok(Evaluation {
        loss: loss / n,
        accuracy: correct as f64 / n,
    })
}

const WEIGHT_SUM_TOL: f64 = 1e-9;

fn check_weights<'a>(weights: impl Iterator<Item = &'a f64>) -> Result<()> {
    let mut sum = 0.0;
    for &w in weights {
        if w.is_nan() || w < 0.0 {
            return Err(Error::Contract(format!("aggregation weight {w} is negative")));
        }
        sum += w;
    }
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::Contract(format!("aggregation weights sum to {sum}, not 1")));
    }
    Ok(())
}

/// Canonical ordering of `(vector, weight)` terms so that floating-point
/// reduction does not depend on the caller's list order.
fn canonical_order(terms: &[(&[f64], f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..terms.len()).collect();
    order.sort_by(|&a, &b| {
        let (va, wa) = terms[a];
        let (vb, wb) = terms[b];
        wa.total_cmp(&wb).then_with(|| {
            va.iter()
                .zip(vb)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    order
}

fn weighted_sum(len: usize, terms: &[(&[f64], f64)]) -> Vec<f64> {
    let mut acc = vec![0.0; len];
    for i in canonical_order(terms) {
        let (v, w) = terms[i];
        axpy(w, v, &mut acc);
    }
    acc
}

/// `base + Σ α_k Δw_k`.
pub fn aggregate(base: &Model, deltas: &[(ModelDelta, f64)]) -> Result<Model> {
    for (d, _) in deltas {
        if d.len() != base.params.len() {
            return Err(Error::Config(format!(
                "delta of length {} does not match model with {} parameters",
                d.len(),
                base.params.len()
            )));
        }
    }
    check_weights(deltas.iter().map(|(_, w)| w))?;
    let terms: Vec<(&[f64], f64)> = deltas.iter().map(|(d, w)| (d.0.as_slice(), *w)).collect();
    let step = weighted_sum(base.params.len(), &terms);
    let params = base.params.iter().zip(&step).map(|(b, s)| b + s).collect();
    Model::from_params(&base.layer_dims, params)
}

/// `Σ α_k w_k`, the model-space average used by synchronous FedAvg.
pub fn weighted_average(models: &[(&Model, f64)]) -> Result<Model> {
    let first = models
        .first()
        .ok_or_else(|| Error::Precondition("nothing to average".into()))?
        .0;
    for (m, _) in models {
        if m.layer_dims != first.layer_dims {
            return Err(Error::Config("cannot average models of different shapes".into()));
        }
    }
    check_weights(models.iter().map(|(_, w)| w))?;
    let terms: Vec<(&[f64], f64)> = models.iter().map(|(m, w)| (m.params.as_slice(), *w)).collect();
    Model::from_params(&first.layer_dims, weighted_sum(first.params.len(), &terms))
}
