//! Feed-forward network with manual backpropagation and local SGD.
//!
//! The whole model lives in one flat `f32` vector so that communication
//! operators can address parameters by index `0..n-1`. The layout is fixed:
//! for each layer `l` (with `in_l` inputs and `out_l` outputs), first the
//! weight matrix in row-major order (`row` = output unit, `col` = input
//! unit), then the `out_l` biases. Layers are concatenated in order.
//!
//! Forward and backward passes accumulate in `f64` and round the gradient to
//! `f32` once, which keeps the analytic gradient tight against a central
//! finite-difference oracle while the stored parameters stay in the wire
//! precision.

use crate::error::{Error, Result};
use crate::seeds::{self, role};
use rand::Rng;

/// Architecture plus initialization seed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    /// Input dim, hidden dims..., class count. At least two entries.
    pub layer_sizes: Vec<usize>,
    /// Seed for weight initialization.
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(layer_sizes: Vec<usize>, seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::TooFewLayers(layer_sizes.len()));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::ZeroLayerSize);
        }
        Ok(Self { layer_sizes, seed })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn class_count(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// (fan_in, fan_out) per layer.
    pub fn layers(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.layer_sizes.windows(2).map(|w| (w[0], w[1]))
    }

    /// n = sum over layers of (fan_in + 1) * fan_out.
    pub fn param_count(&self) -> usize {
        self.layers().map(|(i, o)| (i + 1) * o).sum()
    }

    fn layer_offset(&self, layer: usize) -> usize {
        self.layers()
            .take(layer)
            .map(|(i, o)| (i + 1) * o)
            .sum()
    }

    /// Flat index of a (layer, row, col) weight or (layer, row) bias.
    pub fn flat_index(&self, coord: Coordinate) -> usize {
        match coord {
            Coordinate::Weight { layer, row, col } => {
                let (fan_in, _) = (self.layer_sizes[layer], self.layer_sizes[layer + 1]);
                self.layer_offset(layer) + row * fan_in + col
            }
            Coordinate::Bias { layer, row } => {
                let (fan_in, fan_out) = (self.layer_sizes[layer], self.layer_sizes[layer + 1]);
                self.layer_offset(layer) + fan_in * fan_out + row
            }
        }
    }

    /// Inverse of [`flat_index`](Self::flat_index).
    pub fn coordinate(&self, mut flat: usize) -> Coordinate {
        for (layer, (fan_in, fan_out)) in self.layers().enumerate() {
            let block = (fan_in + 1) * fan_out;
            if flat < block {
                return if flat < fan_in * fan_out {
                    Coordinate::Weight {
                        layer,
                        row: flat / fan_in,
                        col: flat % fan_in,
                    }
                } else {
                    Coordinate::Bias {
                        layer,
                        row: flat - fan_in * fan_out,
                    }
                };
            }
            flat -= block;
        }
        panic!("flat index out of range");
    }
}

/// Structured address of one parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coordinate {
    Weight { layer: usize, row: usize, col: usize },
    Bias { layer: usize, row: usize },
}

/// Dense flat vector of all model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f32>,
}

impl ParamVector {
    pub fn from_vec(values: Vec<f32>) -> Self {
        Self { values }
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            values: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.values
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Accumulated local update: delta = w_before - w_after over p SGD steps.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateVector {
    values: Vec<f32>,
}

impl UpdateVector {
    pub fn from_vec(values: Vec<f32>) -> Self {
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }
}

/// One batch of training samples, row-major features.
#[derive(Debug, Clone)]
pub struct MiniBatch {
    features: Vec<f32>,
    labels: Vec<u32>,
    dim: usize,
}

impl MiniBatch {
    pub fn new(features: Vec<f32>, labels: Vec<u32>, dim: usize) -> Result<Self> {
        if labels.is_empty() || features.len() != labels.len() * dim {
            return Err(Error::ShapeMismatch {
                what: "mini-batch features",
                expected: labels.len() * dim,
                got: features.len(),
            });
        }
        Ok(Self {
            features,
            labels,
            dim,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn feature_row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }
}

/// Result of a local training phase.
#[derive(Debug, Clone)]
pub struct LocalTrainOutput {
    pub w_out: ParamVector,
    pub delta: UpdateVector,
    /// Mean loss over the p batches, before their respective steps.
    pub mean_loss: f64,
}

/// Applies one aggregated update to a single coordinate.
///
/// This is the one arithmetic path shared by the parameter server and by
/// [`Mlp::local_train`]'s delta encoding: the per-worker contributions are
/// summed in `f64` (ascending worker order), averaged, scaled by the server
/// step, rounded to `f32`, and subtracted in `f32`. Keeping both sides on
/// this exact expression is what makes a K=1 full-sync round reproduce the
/// worker's local weights bit for bit.
#[inline]
pub fn apply_update(w: f32, contribution_sum: f64, contributors: usize, eta_prime: f64) -> f32 {
    let mean = contribution_sum / contributors as f64;
    let step = (eta_prime * mean) as f32;
    w - step
}

/// Monotone integer key for f32 ulp stepping (orders negatives below positives).
fn f32_ordinal(x: f32) -> i64 {
    let b = x.to_bits();
    if b & 0x8000_0000 != 0 {
        -((b & 0x7fff_ffff) as i64)
    } else {
        b as i64
    }
}

fn f32_from_ordinal(o: i64) -> f32 {
    if o >= 0 {
        f32::from_bits(o as u32)
    } else {
        f32::from_bits(0x8000_0000 | ((-o) as u32))
    }
}

/// Chooses the f32 delta whose application to `w_in` reproduces `w_out`
/// exactly under [`apply_update`].
///
/// For a single step the accumulated update itself always works (the
/// application is the very expression the step used), which also keeps the
/// p=1 delta equal to lr * grad bit for bit. For multi-step accumulations the
/// accumulator can drift from the subtraction by rounding, so the encoding
/// falls back to `w_in - w_out` and, if that rounds, to its nearest ulp
/// neighbors. A delta that reconstructs exists unless the update dwarfs the
/// weight; in that vanishing corner the raw accumulator is kept.
fn snap_delta(w_in: f32, accumulated: f32, w_out: f32) -> f32 {
    let hits = |d: f32| apply_update(w_in, d as f64, 1, 1.0).to_bits() == w_out.to_bits();
    if hits(accumulated) {
        return accumulated;
    }
    const PROBES: [i64; 17] = [0, 1, -1, 2, -2, 3, -3, 4, -4, 5, -5, 6, -6, 7, -7, 8, -8];
    let base = f32_ordinal(w_in - w_out);
    for off in PROBES {
        let d = f32_from_ordinal(base + off);
        if hits(d) {
            return d;
        }
    }
    accumulated
}

/// The multilayer perceptron: rectified-linear hidden layers, linear output,
/// softmax cross-entropy loss.
#[derive(Debug, Clone)]
pub struct Mlp {
    spec: ModelSpec,
}

impl Mlp {
    pub fn new(spec: ModelSpec) -> Self {
        Self { spec }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    /// Weights uniform in +-1/sqrt(fan_in), biases zero, deterministic in the seed.
    pub fn init_params(&self) -> ParamVector {
        let mut rng = seeds::rng(self.spec.seed, role::MODEL_INIT, 0, 0);
        let mut values = vec![0.0f32; self.spec.param_count()];
        let mut off = 0;
        for (fan_in, fan_out) in self.spec.layers() {
            let scale = 1.0 / (fan_in as f64).sqrt();
            for w in &mut values[off..off + fan_in * fan_out] {
                *w = rng.gen_range(-scale..scale) as f32;
            }
            off += (fan_in + 1) * fan_out; // biases stay zero
        }
        ParamVector::from_vec(values)
    }

    fn check_params(&self, w: &ParamVector) -> Result<()> {
        if w.len() != self.spec.param_count() {
            return Err(Error::ShapeMismatch {
                what: "parameter vector",
                expected: self.spec.param_count(),
                got: w.len(),
            });
        }
        if w.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "parameters" });
        }
        Ok(())
    }

    /// Logits for one input row, computed in f64.
    pub fn logits(&self, w: &[f32], x: &[f32]) -> Vec<f64> {
        let mut act: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let mut off = 0;
        let layer_count = self.spec.layer_sizes.len() - 1;
        for (l, (fan_in, fan_out)) in self.spec.layers().enumerate() {
            let weights = &w[off..off + fan_in * fan_out];
            let biases = &w[off + fan_in * fan_out..off + (fan_in + 1) * fan_out];
            let mut next = vec![0.0f64; fan_out];
            for r in 0..fan_out {
                let row = &weights[r * fan_in..(r + 1) * fan_in];
                let mut acc = biases[r] as f64;
                for (wv, av) in row.iter().zip(&act) {
                    acc += *wv as f64 * av;
                }
                next[r] = if l + 1 < layer_count { acc.max(0.0) } else { acc };
            }
            act = next;
            off += (fan_in + 1) * fan_out;
        }
        act
    }

    /// Mean softmax cross-entropy and its gradient over a batch.
    pub fn loss_and_grad(&self, w: &ParamVector, batch: &MiniBatch) -> Result<(f64, ParamVector)> {
        self.check_params(w)?;
        if batch.dim() != self.spec.input_dim() {
            return Err(Error::ShapeMismatch {
                what: "batch feature dim",
                expected: self.spec.input_dim(),
                got: batch.dim(),
            });
        }
        let classes = self.spec.class_count() as u32;
        for &y in batch.labels() {
            if y >= classes {
                return Err(Error::LabelOutOfRange {
                    label: y,
                    classes,
                });
            }
        }
        if batch.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "features" });
        }

        let n = self.spec.param_count();
        let wv = w.as_slice();
        let mut grad = vec![0.0f64; n];
        let mut loss_sum = 0.0f64;
        let layer_count = self.spec.layer_sizes.len() - 1;
        let batch_size = batch.batch_size();

        // Per-layer activation buffers, reused across samples.
        let mut acts: Vec<Vec<f64>> = self
            .spec
            .layer_sizes
            .iter()
            .map(|&s| vec![0.0f64; s])
            .collect();

        for s in 0..batch_size {
            for (dst, &src) in acts[0].iter_mut().zip(batch.feature_row(s)) {
                *dst = src as f64;
            }
            // Forward.
            let mut off = 0;
            for (l, (fan_in, fan_out)) in self.spec.layers().enumerate() {
                let weights = &wv[off..off + fan_in * fan_out];
                let biases = &wv[off + fan_in * fan_out..off + (fan_in + 1) * fan_out];
                let (before, after) = acts.split_at_mut(l + 1);
                let input = &before[l];
                let output = &mut after[0];
                for r in 0..fan_out {
                    let row = &weights[r * fan_in..(r + 1) * fan_in];
                    let mut acc = biases[r] as f64;
                    for (wvv, av) in row.iter().zip(input.iter()) {
                        acc += *wvv as f64 * av;
                    }
                    output[r] = if l + 1 < layer_count { acc.max(0.0) } else { acc };
                }
                off += (fan_in + 1) * fan_out;
            }

            // Loss via log-sum-exp.
            let logits = &acts[layer_count];
            let y = batch.labels()[s] as usize;
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
            let lse = max + sum_exp.ln();
            loss_sum += lse - logits[y];

            // Backward: d(loss_s)/d(logit_j) = softmax_j - 1[j == y].
            let mut dz: Vec<f64> = logits.iter().map(|&z| (z - lse).exp()).collect();
            dz[y] -= 1.0;

            for l in (0..layer_count).rev() {
                let (fan_in, fan_out) = (self.spec.layer_sizes[l], self.spec.layer_sizes[l + 1]);
                let off = self.spec.layer_offset(l);
                let weights = &wv[off..off + fan_in * fan_out];
                let input = &acts[l];
                let (gw, gb) = grad[off..off + (fan_in + 1) * fan_out].split_at_mut(fan_in * fan_out);
                let mut d_input = vec![0.0f64; fan_in];
                for r in 0..fan_out {
                    let d = dz[r];
                    if d != 0.0 {
                        let grow = &mut gw[r * fan_in..(r + 1) * fan_in];
                        let wrow = &weights[r * fan_in..(r + 1) * fan_in];
                        for ((g, di), (wv, av)) in grow
                            .iter_mut()
                            .zip(d_input.iter_mut())
                            .zip(wrow.iter().zip(input.iter()))
                        {
                            *g += d * av;
                            *di += *wv as f64 * d;
                        }
                    }
                    gb[r] += d;
                }
                if l > 0 {
                    // ReLU mask: output was clamped at zero where pre-activation <= 0.
                    dz = d_input
                        .iter()
                        .zip(acts[l].iter())
                        .map(|(&g, &a)| if a > 0.0 { g } else { 0.0 })
                        .collect();
                }
            }
        }

        let inv_b = 1.0 / batch_size as f64;
        let grad32: Vec<f32> = grad.iter().map(|&g| (g * inv_b) as f32).collect();
        Ok((loss_sum * inv_b, ParamVector::from_vec(grad32)))
    }

    /// Runs `p` plain SGD steps and returns the exit weights plus the
    /// accumulated update encoded so that the server-side application
    /// reproduces the exit weights exactly.
    pub fn local_train(
        &self,
        w: &ParamVector,
        batches: &[MiniBatch],
        lr: f32,
    ) -> Result<LocalTrainOutput> {
        if batches.is_empty() {
            return Err(Error::InvalidConfig("local_train needs p >= 1 batches".into()));
        }
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::InvalidConfig(format!("invalid learning rate {lr}")));
        }
        let n = self.spec.param_count();
        let mut cur = w.clone();
        let mut delta_acc = vec![0.0f32; n];
        let mut loss_sum = 0.0f64;
        for batch in batches {
            let (loss, grad) = self.loss_and_grad(&cur, batch)?;
            loss_sum += loss;
            let cw = cur.as_mut_slice();
            for i in 0..n {
                let u = lr * grad.as_slice()[i];
                cw[i] -= u;
                delta_acc[i] += u;
            }
        }
        if cur.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "trained parameters" });
        }
        let w_in = w.as_slice();
        let w_out = cur.as_slice();
        for i in 0..n {
            delta_acc[i] = snap_delta(w_in[i], delta_acc[i], w_out[i]);
        }
        Ok(LocalTrainOutput {
            delta: UpdateVector::from_vec(delta_acc),
            mean_loss: loss_sum / batches.len() as f64,
            w_out: cur,
        })
    }

    /// Mean loss and argmax accuracy over a labeled feature matrix.
    pub fn evaluate(&self, w: &ParamVector, features: &[f32], labels: &[u32]) -> Result<(f64, f64)> {
        self.check_params(w)?;
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let d = self.spec.input_dim();
        if features.len() != labels.len() * d {
            return Err(Error::ShapeMismatch {
                what: "evaluation features",
                expected: labels.len() * d,
                got: features.len(),
            });
        }
        let classes = self.spec.class_count() as u32;
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for (i, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(Error::LabelOutOfRange { label: y, classes });
            }
            let logits = self.logits(w.as_slice(), &features[i * d..(i + 1) * d]);
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
            loss_sum += max + sum_exp.ln() - logits[y as usize];
            if argmax(&logits) == y as usize {
                correct += 1;
            }
        }
        let m = labels.len() as f64;
        Ok((loss_sum / m, correct as f64 / m))
    }
}

/// First index attaining the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
