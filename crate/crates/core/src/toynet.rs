//! A small fully connected ReLU network trained with stochastic p-GD, used to
//! look at how the exponent shapes the weight distribution.
//!
//! The mirror step is applied coordinate-wise to every weight of every layer,
//! which is the same as applying it to their concatenation. Biases take plain
//! gradient steps unless [`ToyOptions::mirror_biases`] is set.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::json;

use crate::error::{Error, Result};
use crate::fmt::fmt_f64;
use crate::norm::lp_norm;
use crate::pgd::{step_into, BatchSize, PgdConfig, TraceRow, TrainTrace};

pub const HIDDEN_WIDTH: usize = 32;
pub const HISTOGRAM_BINS: usize = 100;
/// Share of weights (by magnitude) kept inside the histogram range.
pub const CROP_QUANTILE: f64 = 0.99;
/// Default near-zero threshold as a fraction of the cropped range width.
pub const DEFAULT_EPSILON_FRACTION: f64 = 1e-3;

/// Multi-class data with dense real features.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    dim: usize,
    classes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl ToyDataset {
    pub fn new(dim: usize, classes: usize, rows: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if rows.len() != labels.len() {
            return Err(Error::Shape {
                expected: rows.len(),
                got: labels.len(),
            });
        }
        if classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        let mut features = Vec::with_capacity(rows.len() * dim);
        for row in &rows {
            if row.len() != dim {
                return Err(Error::Shape {
                    expected: dim,
                    got: row.len(),
                });
            }
            if let Some(index) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { index });
            }
            features.extend_from_slice(row);
        }
        if let Some(&bad) = labels.iter().find(|&&c| c >= classes) {
            return Err(Error::Config(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self {
            dim,
            classes,
            features,
            labels,
        })
    }

    /// Two interleaved half circles with Gaussian jitter, `n / 2` per class
    /// (the odd point goes to class 0).
    pub fn two_moons(n: usize, noise: f64, seed: u64) -> Result<Self> {
        if n < 2 {
            return Err(Error::Config("two_moons needs at least 2 points".into()));
        }
        let jitter = Normal::new(0.0, noise)
            .map_err(|e| Error::Generation(format!("bad noise {noise}: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % 2;
            let t = rng.gen_range(0.0..std::f64::consts::PI);
            let (x, y) = if class == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            rows.push(vec![x + jitter.sample(&mut rng), y + jitter.sample(&mut rng)]);
            labels.push(class);
        }
        Self::new(2, 2, rows, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn point(&self, i: usize) -> (&[f64], usize) {
        (&self.features[i * self.dim..(i + 1) * self.dim], self.labels[i])
    }
}

/// Dense ReLU network. Layer `k` maps `widths[k]` inputs to `widths[k + 1]`
/// outputs; its weights are stored row-major by output unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

/// Per-layer gradients, same layout as the network.
#[derive(Debug, Clone)]
struct Grads {
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl Mlp {
    /// Fan-in uniform init, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, zero biases.
    pub fn new(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("invalid layer widths {widths:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(widths.len() - 1);
        let mut biases = Vec::with_capacity(widths.len() - 1);
        for pair in widths.windows(2) {
            let bound = 1.0 / (pair[0] as f64).sqrt();
            weights.push(
                (0..pair[0] * pair[1])
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect(),
            );
            biases.push(vec![0.0; pair[1]]);
        }
        Ok(Self {
            widths: widths.to_vec(),
            weights,
            biases,
        })
    }

    /// `[input, 32, 32, classes]`.
    pub fn default_widths(input: usize, classes: usize) -> Vec<usize> {
        vec![input, HIDDEN_WIDTH, HIDDEN_WIDTH, classes]
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn layer_weights(&self, layer: usize) -> &[f64] {
        &self.weights[layer]
    }

    pub fn layer_biases(&self, layer: usize) -> &[f64] {
        &self.biases[layer]
    }

    pub fn weight_count(&self) -> usize {
        self.weights.iter().map(Vec::len).sum()
    }

    pub fn parameter_count(&self) -> usize {
        self.weight_count() + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// All weights, layer by layer.
    pub fn flat_weights(&self) -> Vec<f64> {
        self.weights.iter().flatten().copied().collect()
    }

    fn check_data(&self, data: &ToyDataset) -> Result<()> {
        if data.dim() != self.widths[0] {
            return Err(Error::Shape {
                expected: self.widths[0],
                got: data.dim(),
            });
        }
        let out = *self.widths.last().unwrap();
        if data.classes() != out {
            return Err(Error::Shape {
                expected: out,
                got: data.classes(),
            });
        }
        Ok(())
    }

    /// Activations of every layer; the last entry holds the logits.
    fn forward(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let last = self.weights.len() - 1;
        let mut acts = Vec::with_capacity(self.widths.len());
        acts.push(x.to_vec());
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let input = &acts[k];
            let fan_in = self.widths[k];
            let out: Vec<f64> = b
                .iter()
                .enumerate()
                .map(|(o, &bo)| {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    let z = bo + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
                    if k < last {
                        z.max(0.0)
                    } else {
                        z
                    }
                })
                .collect();
            acts.push(out);
        }
        acts
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x).pop().unwrap()
    }

    /// Lowest-index argmax of the logits.
    pub fn predict(&self, x: &[f64]) -> usize {
        let z = self.logits(x);
        let mut best = 0;
        for (c, &v) in z.iter().enumerate() {
            if v > z[best] {
                best = c;
            }
        }
        best
    }

    pub fn accuracy(&self, data: &ToyDataset) -> f64 {
        let hits = (0..data.len())
            .filter(|&i| {
                let (x, y) = data.point(i);
                self.predict(x) == y
            })
            .count();
        hits as f64 / data.len() as f64
    }

    /// Mean softmax cross-entropy.
    pub fn loss(&self, data: &ToyDataset) -> f64 {
        let total: f64 = (0..data.len())
            .map(|i| {
                let (x, y) = data.point(i);
                cross_entropy(&self.logits(x), y).0
            })
            .sum();
        total / data.len() as f64
    }

    /// `min_i (z_{y_i} - max_{c != y_i} z_c)`; positive iff every point is
    /// classified correctly.
    pub fn min_margin(&self, data: &ToyDataset) -> f64 {
        (0..data.len())
            .map(|i| {
                let (x, y) = data.point(i);
                let z = self.logits(x);
                let other = z
                    .iter()
                    .enumerate()
                    .filter(|&(c, _)| c != y)
                    .map(|(_, &v)| v)
                    .fold(f64::NEG_INFINITY, f64::max);
                z[y] - other
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn zero_grads(&self) -> Grads {
        Grads {
            weights: self.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: self.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    /// Mean loss over `rows` and its gradient, accumulated in row order.
    fn loss_and_grad(&self, data: &ToyDataset, rows: &[usize], g: &mut Grads) -> f64 {
        g.weights.iter_mut().flatten().for_each(|v| *v = 0.0);
        g.biases.iter_mut().flatten().for_each(|v| *v = 0.0);
        let scale = 1.0 / rows.len() as f64;
        let mut total = 0.0;
        for &i in rows {
            let (x, y) = data.point(i);
            let acts = self.forward(x);
            let (l, mut delta) = cross_entropy(acts.last().unwrap(), y);
            total += l;
            for k in (0..self.weights.len()).rev() {
                let fan_in = self.widths[k];
                let input = &acts[k];
                for (o, &d) in delta.iter().enumerate() {
                    g.biases[k][o] += scale * d;
                    let row = &mut g.weights[k][o * fan_in..(o + 1) * fan_in];
                    for (gw, &a) in row.iter_mut().zip(input) {
                        *gw += scale * d * a;
                    }
                }
                if k > 0 {
                    let w = &self.weights[k];
                    delta = (0..fan_in)
                        .map(|j| {
                            if input[j] <= 0.0 {
                                return 0.0;
                            }
                            delta
                                .iter()
                                .enumerate()
                                .map(|(o, &d)| d * w[o * fan_in + j])
                                .sum()
                        })
                        .collect();
                }
            }
        }
        total * scale
    }
}

/// Loss and its gradient with respect to the logits.
fn cross_entropy(z: &[f64], y: usize) -> (f64, Vec<f64>) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + m - z[y];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[y] -= 1.0;
    (loss, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyOptions {
    /// Apply the mirror step to biases as well.
    pub mirror_biases: bool,
    /// Stop at the end of the first epoch with 100% training accuracy.
    pub stop_at_interpolation: bool,
}

impl Default for ToyOptions {
    fn default() -> Self {
        Self {
            mirror_biases: false,
            stop_at_interpolation: true,
        }
    }
}

pub fn train_toynet(cfg: &PgdConfig, data: &ToyDataset, arch: &Mlp) -> Result<(Mlp, TrainTrace)> {
    train_toynet_with(cfg, data, arch, &ToyOptions::default())
}

/// Mini-batch p-GD on the network weights. Batches follow the same seeded
/// shuffle as the linear trainer. Trace rows hold the full-data loss, the lp
/// norm of all weights and the smallest logit margin.
pub fn train_toynet_with(
    cfg: &PgdConfig,
    data: &ToyDataset,
    arch: &Mlp,
    opts: &ToyOptions,
) -> Result<(Mlp, TrainTrace)> {
    let n = data.len();
    cfg.validate(Some(n))?;
    arch.check_data(data)?;
    let batch = match cfg.batch_size {
        BatchSize::Full => n,
        BatchSize::Size(b) => b,
    };
    let psi = cfg.potential;
    let p = psi.p();
    let mut net = arch.clone();
    let mut trace = TrainTrace {
        final_eta: Some(cfg.eta),
        ..TrainTrace::default()
    };
    if cfg.max_iters == 0 {
        return Ok((net, trace));
    }

    let row = |net: &Mlp, iter: u64| TraceRow {
        iter,
        loss: net.loss(data),
        p_norm: lp_norm(&net.flat_weights(), p),
        margin: net.min_margin(data),
        bregman_to_ref: None,
    };
    let diverged = |iter: u64, what: &str, trace: &TrainTrace| Error::Divergence {
        iter,
        reason: format!("{what} became non-finite"),
        partial: Box::new(trace.clone()),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rows: Vec<usize> = Vec::with_capacity(batch);
    let per_epoch = n / batch;
    let mut cursor = per_epoch;
    let mut grads = net.zero_grads();
    let mut next: Vec<f64> = Vec::new();

    for t in 0..cfg.max_iters {
        if cursor == per_epoch {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        rows.clear();
        rows.extend_from_slice(&order[cursor * batch..(cursor + 1) * batch]);
        rows.sort_unstable();
        cursor += 1;

        let l = net.loss_and_grad(data, &rows, &mut grads);
        if !l.is_finite() {
            return Err(diverged(t, "loss", &trace));
        }
        for (w, g) in net.weights.iter_mut().zip(&grads.weights) {
            next.resize(w.len(), 0.0);
            step_into(&psi, cfg.eta, w, g, &mut next).map_err(|_| diverged(t + 1, "a weight", &trace))?;
            w.copy_from_slice(&next);
        }
        for (b, g) in net.biases.iter_mut().zip(&grads.biases) {
            if opts.mirror_biases {
                next.resize(b.len(), 0.0);
                step_into(&psi, cfg.eta, b, g, &mut next).map_err(|_| diverged(t + 1, "a bias", &trace))?;
                b.copy_from_slice(&next);
            } else {
                for (bj, gj) in b.iter_mut().zip(g) {
                    *bj -= cfg.eta * gj;
                }
                if b.iter().any(|v| !v.is_finite()) {
                    return Err(diverged(t + 1, "a bias", &trace));
                }
            }
        }

        let t1 = t + 1;
        let epoch_done = cursor == per_epoch;
        if opts.stop_at_interpolation && epoch_done && net.accuracy(data) == 1.0 {
            trace.rows.push(row(&net, t1));
            return Ok((net, trace));
        }
        if t1 % cfg.trace_stride == 0 || t1 == cfg.max_iters {
            trace.rows.push(row(&net, t1));
        }
    }
    let acc = net.accuracy(data);
    if acc < 1.0 {
        let msg = format!(
            "training accuracy {acc} after {} steps; the network did not interpolate",
            cfg.max_iters
        );
        log::warn!("{msg}");
        trace.warning = Some(msg);
    }
    Ok((net, trace))
}

/// Histogram of all network weights after cropping the tails.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightHistogram {
    /// `HISTOGRAM_BINS + 1` uniform edges over `[-range, range]`.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub epsilon: f64,
    /// Share of all weights with `|w| < epsilon`.
    pub near_zero_fraction: f64,
    pub max_abs_weight: f64,
}

impl WeightHistogram {
    pub const CSV_HEADER: &'static str = "bin_left,bin_right,count";

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for (k, c) in self.counts.iter().enumerate() {
            let _ = writeln!(out, "{},{},{c}", fmt_f64(self.edges[k]), fmt_f64(self.edges[k + 1]));
        }
        out
    }

    pub fn stats_json(&self, p: f64, seed: u64) -> serde_json::Value {
        json!({
            "near_zero_fraction": self.near_zero_fraction,
            "max_abs_weight": self.max_abs_weight,
            "p": p,
            "seed": seed,
        })
    }
}

/// Half-width of the histogram: the `CROP_QUANTILE` quantile of `|w|`.
fn crop_radius(abs_sorted: &[f64]) -> f64 {
    if abs_sorted.is_empty() {
        return 0.0;
    }
    let k = ((CROP_QUANTILE * abs_sorted.len() as f64).ceil() as usize).clamp(1, abs_sorted.len());
    abs_sorted[k - 1]
}

fn sorted_abs(model: &Mlp) -> Vec<f64> {
    let mut v: Vec<f64> = model.flat_weights().iter().map(|w| w.abs()).collect();
    v.sort_by(f64::total_cmp);
    v
}

/// `DEFAULT_EPSILON_FRACTION` of the cropped range width.
pub fn default_epsilon(model: &Mlp) -> f64 {
    let r = crop_radius(&sorted_abs(model));
    let r = if r > 0.0 { r } else { 1.0 };
    DEFAULT_EPSILON_FRACTION * 2.0 * r
}

pub fn weight_histogram(model: &Mlp, epsilon: f64) -> WeightHistogram {
    let weights = model.flat_weights();
    let abs = sorted_abs(model);
    // An all-zero model has no spread; fall back to [-1, 1] so the spike at 0
    // still lands in a bin.
    let r = match crop_radius(&abs) {
        r if r > 0.0 => r,
        _ => 1.0,
    };
    let width = 2.0 * r / HISTOGRAM_BINS as f64;
    let edges: Vec<f64> = (0..=HISTOGRAM_BINS)
        .map(|k| -r + width * k as f64)
        .collect();
    let mut counts = vec![0u64; HISTOGRAM_BINS];
    for &w in &weights {
        if w.abs() <= r {
            let k = (((w + r) / width).floor() as usize).min(HISTOGRAM_BINS - 1);
            counts[k] += 1;
        }
    }
    let near = weights.iter().filter(|w| w.abs() < epsilon).count();
    WeightHistogram {
        edges,
        counts,
        epsilon,
        near_zero_fraction: near as f64 / weights.len().max(1) as f64,
        max_abs_weight: abs.last().copied().unwrap_or(0.0),
    }
}
