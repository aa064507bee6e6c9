//! p-GD: mirror descent with the potential `(1/p) ||w||_p^p`.
//!
//! Each step is coordinate-wise:
//!
//! ```text
//! z_j     = sign(w_j) |w_j|^(p-1) - eta * g_j
//! w'_j    = sign(z_j) |z_j|^(1/(p-1))
//! ```
//!
//! which is the abstract mirror step `grad psi(w') = grad psi(w) - eta g`
//! written out for this potential. At `p = 2` both powers are the identity and
//! the step is plain gradient descent, bit for bit.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt::fmt_f64;
use crate::linmodel::{loss_and_grad_rows, loss_rows, margin_slice, Dataset, Loss};
use crate::norm::{dot, lp_norm, signed_pow};
use crate::potential::{Potential, WeightVector, DUAL_MAGNITUDE_WARNING};

/// Allowed loss increase per step before it counts as a violation.
pub const MONOTONE_TOLERANCE: f64 = 1e-12;

const MAX_GUARD_HALVINGS: u32 = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchSize {
    Full,
    Size(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgdConfig {
    pub potential: Potential,
    pub eta: f64,
    pub max_iters: u64,
    /// Record every `trace_stride`-th iterate (and always the last one).
    pub trace_stride: u64,
    pub seed: u64,
    pub batch_size: BatchSize,
    /// Halve `eta` whenever a step would increase the loss. Off by default so
    /// runs follow the fixed-step protocol.
    pub monotone_guard: bool,
}

impl PgdConfig {
    pub const DEFAULT_ETA: f64 = 1e-4;
    pub const DEFAULT_TRACE_STRIDE: u64 = 1000;

    pub fn new(p: f64, eta: f64, max_iters: u64) -> Result<Self> {
        let cfg = Self {
            potential: Potential::new(p)?,
            eta,
            max_iters,
            trace_stride: Self::DEFAULT_TRACE_STRIDE,
            seed: 0,
            batch_size: BatchSize::Full,
            monotone_guard: false,
        };
        cfg.validate(None)?;
        Ok(cfg)
    }

    pub fn with_trace_stride(mut self, stride: u64) -> Self {
        self.trace_stride = stride;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_batch_size(mut self, batch: BatchSize) -> Self {
        self.batch_size = batch;
        self
    }

    pub fn with_monotone_guard(mut self, on: bool) -> Self {
        self.monotone_guard = on;
        self
    }

    pub fn validate(&self, n: Option<usize>) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        if self.trace_stride == 0 {
            return Err(Error::Config("trace_stride must be at least 1".into()));
        }
        if let BatchSize::Size(b) = self.batch_size {
            if b == 0 {
                return Err(Error::Config("batch_size must be positive".into()));
            }
            if let Some(n) = n {
                if b > n {
                    return Err(Error::Config(format!(
                        "batch_size {b} exceeds dataset size {n}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: u64,
    pub loss: f64,
    pub p_norm: f64,
    pub margin: f64,
    /// `D_psi(reference, w_t / ||w_t||_p)`, when a reference was supplied.
    pub bregman_to_ref: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
    /// Largest one-step loss increase seen over every step (not only the
    /// recorded ones). `None` when it was not tracked.
    pub max_loss_increase: Option<f64>,
    /// Step size in effect at the end of the run.
    pub final_eta: Option<f64>,
    pub warning: Option<String>,
}

impl TrainTrace {
    pub const CSV_HEADER: &'static str = "iter,loss,p_norm,margin,bregman_to_ref";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.iter,
                fmt_f64(r.loss),
                fmt_f64(r.p_norm),
                fmt_f64(r.margin),
                r.bregman_to_ref.map(fmt_f64).unwrap_or_default()
            );
        }
        out
    }

    /// Parses the rows written by [`TrainTrace::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(Self::CSV_HEADER) {
            return Err(Error::Parse("unexpected trace header".into()));
        }
        let mut rows = Vec::new();
        for (k, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(Error::Parse(format!("trace row {}: expected 5 fields", k + 1)));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("trace row {}: {e}", k + 1)))
            };
            rows.push(TraceRow {
                iter: f[0]
                    .parse()
                    .map_err(|e| Error::Parse(format!("trace row {}: {e}", k + 1)))?,
                loss: num(f[1])?,
                p_norm: num(f[2])?,
                margin: num(f[3])?,
                bregman_to_ref: if f[4].is_empty() { None } else { Some(num(f[4])?) },
            });
        }
        Ok(Self {
            rows,
            ..Self::default()
        })
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }
}

/// One coordinate-wise step into `out`. Returns the largest dual magnitude, or
/// the first coordinate that became non-finite.
#[inline]
pub(crate) fn step_into(
    psi: &Potential,
    eta: f64,
    w: &[f64],
    grad: &[f64],
    out: &mut [f64],
) -> std::result::Result<f64, usize> {
    let up = psi.p() - 1.0;
    let down = 1.0 / up;
    let mut max_dual = 0.0_f64;
    for (j, ((o, &wj), &gj)) in out.iter_mut().zip(w).zip(grad).enumerate() {
        let z = signed_pow(wj, up) - eta * gj;
        let next = signed_pow(z, down);
        if !next.is_finite() {
            return Err(j);
        }
        max_dual = max_dual.max(z.abs());
        *o = next;
    }
    Ok(max_dual)
}

/// A single full-batch p-GD step from `w`.
pub fn pgd_step(cfg: &PgdConfig, loss: Loss, data: &Dataset, w: &WeightVector) -> Result<WeightVector> {
    cfg.validate(Some(data.len()))?;
    data.check_dim(w.as_slice())?;
    let mut grad = vec![0.0; data.dim()];
    loss_and_grad_rows(loss, data, w.as_slice(), 0..data.len(), &mut grad)
        .map_err(|e| divergence(0, e.to_string(), TrainTrace::default()))?;
    let mut out = vec![0.0; data.dim()];
    step_into(&cfg.potential, cfg.eta, w.as_slice(), &grad, &mut out).map_err(|j| {
        divergence(1, format!("coordinate {j} became non-finite"), TrainTrace::default())
    })?;
    Ok(WeightVector::from_finite(out))
}

fn divergence(iter: u64, reason: String, partial: TrainTrace) -> Error {
    Error::Divergence {
        iter,
        reason,
        partial: Box::new(partial),
    }
}

struct Recorder<'a> {
    psi: Potential,
    data: &'a Dataset,
    reference: Option<&'a [f64]>,
    stride: u64,
    last: u64,
    scratch: Vec<f64>,
}

impl Recorder<'_> {
    fn due(&self, t: u64) -> bool {
        t % self.stride == 0 || t == self.last
    }

    fn row(&mut self, t: u64, loss: f64, w: &[f64]) -> Result<TraceRow> {
        let p = self.psi.p();
        let p_norm = lp_norm(w, p);
        let margin = margin_slice(self.data, w)?;
        let bregman_to_ref = match self.reference {
            Some(r) if p_norm > 0.0 => {
                for (s, v) in self.scratch.iter_mut().zip(w) {
                    *s = v / p_norm;
                }
                Some(self.psi.bregman_slice(r, &self.scratch))
            }
            Some(_) => None,
            None => None,
        };
        Ok(TraceRow {
            iter: t,
            loss,
            p_norm,
            margin,
            bregman_to_ref,
        })
    }
}

fn check_reference(psi: &Potential, dim: usize, reference: Option<&WeightVector>) -> Result<()> {
    if let Some(r) = reference {
        if r.dim() != dim {
            return Err(Error::Shape {
                expected: dim,
                got: r.dim(),
            });
        }
        let n = r.lp_norm(psi.p());
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "reference direction must have unit lp norm, got {n}"
            )));
        }
    }
    Ok(())
}

/// Full-batch p-GD for `cfg.max_iters` steps from `w0`.
///
/// When `reference` (a unit-lp direction) is supplied, each recorded row also
/// carries the Bregman divergence from it to the normalized iterate.
pub fn run_pgd(
    cfg: &PgdConfig,
    loss: Loss,
    data: &Dataset,
    w0: &WeightVector,
    reference: Option<&WeightVector>,
) -> Result<(WeightVector, TrainTrace)> {
    cfg.validate(Some(data.len()))?;
    data.check_dim(w0.as_slice())?;
    check_reference(&cfg.potential, data.dim(), reference)?;
    let mut trace = TrainTrace {
        max_loss_increase: Some(f64::NEG_INFINITY),
        final_eta: Some(cfg.eta),
        ..TrainTrace::default()
    };
    if cfg.max_iters == 0 {
        trace.max_loss_increase = None;
        return Ok((w0.clone(), trace));
    }

    let d = data.dim();
    let psi = cfg.potential;
    let mut rec = Recorder {
        psi,
        data,
        reference: reference.map(|r| r.as_slice()),
        stride: cfg.trace_stride,
        last: cfg.max_iters,
        scratch: vec![0.0; d],
    };
    let mut w = w0.as_slice().to_vec();
    let mut grad = vec![0.0; d];
    let mut cand = vec![0.0; d];
    let mut cand_grad = vec![0.0; d];
    let mut eta = cfg.eta;
    let mut warned = false;
    let mut max_increase = f64::NEG_INFINITY;

    let mut loss_w = loss_and_grad_rows(loss, data, &w, 0..data.len(), &mut grad)
        .map_err(|e| divergence(0, e.to_string(), trace.clone()))?;

    for t in 0..cfg.max_iters {
        let mut halvings = 0;
        let loss_c = loop {
            let max_dual = match step_into(&psi, eta, &w, &grad, &mut cand) {
                Ok(m) => m,
                Err(j) => {
                    trace.max_loss_increase = Some(max_increase);
                    return Err(divergence(
                        t + 1,
                        format!("coordinate {j} became non-finite"),
                        trace,
                    ));
                }
            };
            if max_dual > DUAL_MAGNITUDE_WARNING && !warned {
                log::warn!(
                    "dual magnitude {max_dual:e} at iteration {} (p = {}); precision loss likely",
                    t + 1,
                    psi.p()
                );
                warned = true;
            }
            let loss_c = match loss_and_grad_rows(loss, data, &cand, 0..data.len(), &mut cand_grad) {
                Ok(l) => l,
                Err(e) => {
                    trace.max_loss_increase = Some(max_increase);
                    return Err(divergence(
                        t + 1,
                        format!("{e}; reduce the step size"),
                        trace,
                    ));
                }
            };
            if cfg.monotone_guard && loss_c > loss_w + MONOTONE_TOLERANCE {
                halvings += 1;
                if halvings > MAX_GUARD_HALVINGS {
                    trace.max_loss_increase = Some(max_increase);
                    return Err(divergence(
                        t + 1,
                        "monotone guard could not find a decreasing step".into(),
                        trace,
                    ));
                }
                eta *= 0.5;
                continue;
            }
            break loss_c;
        };
        max_increase = max_increase.max(loss_c - loss_w);
        std::mem::swap(&mut w, &mut cand);
        std::mem::swap(&mut grad, &mut cand_grad);
        loss_w = loss_c;
        let t1 = t + 1;
        if rec.due(t1) {
            trace.rows.push(rec.row(t1, loss_w, &w)?);
        }
    }
    trace.max_loss_increase = Some(max_increase);
    trace.final_eta = Some(eta);
    Ok((WeightVector::from_finite(w), trace))
}

/// Mini-batch p-GD. Each epoch shuffles the sample indices with a seeded
/// ChaCha stream and walks through consecutive batches (a trailing partial
/// batch is dropped). Indices inside a batch are summed in ascending order, so
/// `batch_size = n` reproduces [`run_pgd`] exactly.
pub fn run_stochastic_pgd(
    cfg: &PgdConfig,
    loss: Loss,
    data: &Dataset,
    w0: &WeightVector,
) -> Result<(WeightVector, TrainTrace)> {
    cfg.validate(Some(data.len()))?;
    data.check_dim(w0.as_slice())?;
    let n = data.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let batch = match cfg.batch_size {
        BatchSize::Full => n,
        BatchSize::Size(b) => b,
    };
    let mut trace = TrainTrace {
        final_eta: Some(cfg.eta),
        ..TrainTrace::default()
    };
    if cfg.max_iters == 0 {
        return Ok((w0.clone(), trace));
    }

    let d = data.dim();
    let psi = cfg.potential;
    let mut rec = Recorder {
        psi,
        data,
        reference: None,
        stride: cfg.trace_stride,
        last: cfg.max_iters,
        scratch: vec![0.0; d],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut batch_rows: Vec<usize> = Vec::with_capacity(batch);
    let per_epoch = n / batch;
    let mut cursor = per_epoch;
    let mut w = w0.as_slice().to_vec();
    let mut grad = vec![0.0; d];
    let mut next = vec![0.0; d];

    for t in 0..cfg.max_iters {
        if cursor == per_epoch {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        batch_rows.clear();
        batch_rows.extend_from_slice(&order[cursor * batch..(cursor + 1) * batch]);
        batch_rows.sort_unstable();
        cursor += 1;

        loss_and_grad_rows(loss, data, &w, batch_rows.iter().copied(), &mut grad)
            .map_err(|e| divergence(t, e.to_string(), trace.clone()))?;
        if let Err(j) = step_into(&psi, cfg.eta, &w, &grad, &mut next) {
            return Err(divergence(
                t + 1,
                format!("coordinate {j} became non-finite"),
                trace,
            ));
        }
        std::mem::swap(&mut w, &mut next);
        let t1 = t + 1;
        if rec.due(t1) {
            let full = loss_rows(loss, data, &w, 0..n)
                .map_err(|e| divergence(t1, e.to_string(), trace.clone()))?;
            trace.rows.push(rec.row(t1, full, &w)?);
        }
    }
    Ok((WeightVector::from_finite(w), trace))
}

/// Residuals of the two forms of the one-step mirror descent identity,
/// evaluated with `w_{t+1}` produced by one p-GD step from `w_t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MdIdentityResidual {
    /// `D_psi(w, w_t)`, the common left-hand side.
    pub lhs: f64,
    pub residual_loss_form: f64,
    pub residual_gradient_form: f64,
}

impl MdIdentityResidual {
    pub fn max_residual(&self) -> f64 {
        self.residual_loss_form.max(self.residual_gradient_form)
    }

    /// `max_residual / (1 + |lhs|)`.
    pub fn relative(&self) -> f64 {
        self.max_residual() / (1.0 + self.lhs.abs())
    }
}

/// Evaluates both sides of
///
/// ```text
/// D(w, w_t) = D(w, w_t+1) + D_{psi - eta L}(w_t+1, w_t) + eta D_L(w, w_t) - eta L(w) + eta L(w_t+1)
///           = D(w, w_t+1) + D_{psi - eta L}(w_t+1, w_t) - eta <grad L(w_t), w - w_t> - eta L(w_t) + eta L(w_t+1)
/// ```
///
/// with `D_{psi - eta L} = D_psi - eta D_L`.
pub fn check_md_identity(
    psi: &Potential,
    loss: Loss,
    data: &Dataset,
    w: &WeightVector,
    w_t: &WeightVector,
    eta: f64,
) -> Result<MdIdentityResidual> {
    let d = data.dim();
    data.check_dim(w.as_slice())?;
    data.check_dim(w_t.as_slice())?;
    let (w, wt) = (w.as_slice(), w_t.as_slice());
    let mut g = vec![0.0; d];
    let l_t = loss_and_grad_rows(loss, data, wt, 0..data.len(), &mut g)?;
    let mut wt1 = vec![0.0; d];
    step_into(psi, eta, wt, &g, &mut wt1)
        .map_err(|j| divergence(1, format!("coordinate {j} became non-finite"), TrainTrace::default()))?;
    let l_w = loss_rows(loss, data, w, 0..data.len())?;
    let l_t1 = loss_rows(loss, data, &wt1, 0..data.len())?;

    let grad_dot = |a: &[f64], b: &[f64]| -> f64 {
        g.iter().zip(a.iter().zip(b)).map(|(gj, (x, y))| gj * (x - y)).sum()
    };
    let d_l = |x: &[f64], lx: f64| lx - l_t - grad_dot(x, wt);

    let lhs = psi.bregman_slice(w, wt);
    let d_w_t1 = psi.bregman_slice(w, &wt1);
    let d_shifted = psi.bregman_slice(&wt1, wt) - eta * d_l(&wt1, l_t1);

    let rhs_loss = d_w_t1 + d_shifted + eta * d_l(w, l_w) - eta * l_w + eta * l_t1;
    let rhs_grad = d_w_t1 + d_shifted - eta * grad_dot(w, wt) - eta * l_t + eta * l_t1;
    Ok(MdIdentityResidual {
        lhs,
        residual_loss_form: (lhs - rhs_loss).abs(),
        residual_gradient_form: (lhs - rhs_grad).abs(),
    })
}

/// `rhs - lhs` of the one-step norm growth bound
///
/// ```text
/// (p-1)/p ||w_t+1||_p^p - (p-1)/p ||w_t||_p^p + eta L(w_t+1) - eta L(w_t) <= <-eta grad L(w_t), w_t>
/// ```
pub fn update_lower_bound_slack(
    psi: &Potential,
    loss: Loss,
    data: &Dataset,
    w: &WeightVector,
    eta: f64,
) -> Result<f64> {
    let d = data.dim();
    data.check_dim(w.as_slice())?;
    let wt = w.as_slice();
    let mut g = vec![0.0; d];
    let l_t = loss_and_grad_rows(loss, data, wt, 0..data.len(), &mut g)?;
    let mut wt1 = vec![0.0; d];
    step_into(psi, eta, wt, &g, &mut wt1)
        .map_err(|j| divergence(1, format!("coordinate {j} became non-finite"), TrainTrace::default()))?;
    let l_t1 = loss_rows(loss, data, &wt1, 0..data.len())?;
    let p = psi.p();
    let c = (p - 1.0) / p;
    let pow = |v: &[f64]| v.iter().map(|x| if *x == 0.0 { 0.0 } else { x.abs().powf(p) }).sum::<f64>();
    let lhs = c * pow(&wt1) - c * pow(wt) + eta * l_t1 - eta * l_t;
    let rhs = -eta * dot(&g, wt);
    Ok(rhs - lhs)
}

/// Whether the one-step norm growth bound holds up to `1e-9`.
pub fn check_update_lower_bound(
    psi: &Potential,
    loss: Loss,
    data: &Dataset,
    w: &WeightVector,
    eta: f64,
) -> Result<bool> {
    Ok(update_lower_bound_slack(psi, loss, data, w, eta)? >= -1e-9)
}

/// `<grad L(w), w> - ||w||_p <grad L(w), reference>`; non-negative once the
/// iterate has aligned with the max-margin direction.
pub fn cross_term_slack(
    psi: &Potential,
    loss: Loss,
    data: &Dataset,
    w: &WeightVector,
    reference: &WeightVector,
) -> Result<f64> {
    data.check_dim(w.as_slice())?;
    data.check_dim(reference.as_slice())?;
    let mut g = vec![0.0; data.dim()];
    loss_and_grad_rows(loss, data, w.as_slice(), 0..data.len(), &mut g)?;
    Ok(dot(&g, w.as_slice()) - w.lp_norm(psi.p()) * dot(&g, reference.as_slice()))
}
