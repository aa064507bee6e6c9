//! Ground-truth solvers for the lp max-margin direction and the lp
//! regularization path.
//!
//! Both run Frank–Wolfe over an lp ball, whose linear maximization oracle has
//! the closed form `s_j = r sign(g_j) |g_j|^(q-1) / ||g||_q^(q-1)`. No lp
//! projection is ever needed.
//!
//! The max-margin solver maximizes the soft-min surrogate
//! `f_tau(w) = -tau log sum_i exp(-z_i / tau)` of the margin and halves `tau`
//! between rounds. The softmax weights `lambda` it computes are feasible for
//! the dual problem `min_{lambda in simplex} ||X^T lambda||_q`, so every
//! iteration also yields a certified upper bound on the optimal margin.
//!
//! For large p the ball is nearly a cube and Frank–Wolfe can stall well short
//! of `tol`. When its budget runs out, the best direction seeds a log-barrier
//! Newton method on `max gamma s.t. <z_i, w> >= gamma, ||w||_p^p <= 1`, whose
//! central-path multipliers give the same kind of dual certificate.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{BestSoFar, Error, Result};
use crate::linmodel::{margin, Dataset, Loss, EXP_OVERFLOW_SCORE};
use crate::norm::{dot, lp_distance, lp_norm, max_abs, signed_pow};
use crate::potential::{Potential, WeightVector};

pub const DEFAULT_MARGIN_TOL: f64 = 1e-6;
pub const DEFAULT_REG_PATH_TOL: f64 = 1e-4;

/// A unit-lp direction with its margin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginSolution {
    pub direction: WeightVector,
    pub margin: f64,
    pub iterations_used: usize,
    /// Certified upper bound on `optimal margin - margin`.
    pub duality_gap_estimate: f64,
}

/// An approximate minimizer of the loss over the lp ball of radius `budget`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegPathPoint {
    pub budget: f64,
    pub minimizer: WeightVector,
    pub loss_value: f64,
    pub iterations_used: usize,
    pub fw_gap: f64,
}

#[derive(Debug, Clone)]
pub struct MarginOptions {
    pub tol: f64,
    /// Frank–Wolfe iterations summed over all temperature rounds.
    pub max_iters: usize,
    pub max_rounds: usize,
    /// Newton steps for the barrier refinement after Frank–Wolfe stalls.
    pub max_newton: usize,
    /// Starting point; rescaled into the unit ball. Defaults to the
    /// oracle answer for the mean folded point.
    pub start: Option<WeightVector>,
}

impl Default for MarginOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_MARGIN_TOL,
            max_iters: 20_000,
            max_rounds: 40,
            max_newton: 2_000,
            start: None,
        }
    }
}

/// `argmax_{||s||_p <= radius} <g, s>` into `out`; zero when `g = 0`.
fn ball_oracle(g: &[f64], q: f64, radius: f64, out: &mut [f64]) {
    let m = max_abs(g);
    if m == 0.0 {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    // Scale by the largest entry first; the answer is scale invariant.
    let e = q - 1.0;
    let mut norm_pow = 0.0;
    for (o, &v) in out.iter_mut().zip(g) {
        let h = v.abs() / m;
        norm_pow += h.powf(q);
        *o = h.powf(e).copysign(v);
    }
    // ||h||_q^(q-1) with h = g / m.
    let scale = radius / norm_pow.powf(e / q);
    out.iter_mut().for_each(|o| *o *= scale);
}

fn matvec(data: &Dataset, w: &[f64], z: &mut [f64]) {
    for (i, zi) in z.iter_mut().enumerate() {
        *zi = dot(data.folded_row(i), w);
    }
}

fn transpose_matvec(data: &Dataset, lambda: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for (i, &l) in lambda.iter().enumerate() {
        if l == 0.0 {
            continue;
        }
        for (o, x) in out.iter_mut().zip(data.folded_row(i)) {
            *o += l * x;
        }
    }
}

/// Softmax of `-z / tau` into `lambda`.
fn soft_weights(z: &[f64], tau: f64, lambda: &mut [f64]) {
    let zmin = z.iter().copied().fold(f64::INFINITY, f64::min);
    let mut total = 0.0;
    for (l, &zi) in lambda.iter_mut().zip(z) {
        *l = (-(zi - zmin) / tau).exp();
        total += *l;
    }
    lambda.iter_mut().for_each(|l| *l /= total);
}

/// Derivative of `gamma -> f_tau(z + gamma dz)`.
fn soft_min_slope(z: &[f64], dz: &[f64], gamma: f64, tau: f64) -> f64 {
    let zmin = z
        .iter()
        .zip(dz)
        .map(|(a, b)| a + gamma * b)
        .fold(f64::INFINITY, f64::min);
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in z.iter().zip(dz) {
        let e = (-(a + gamma * b - zmin) / tau).exp();
        num += e * b;
        den += e;
    }
    num / den
}

/// Maximizer in `[0, 1]` of a concave function given its derivative.
fn concave_line_search(slope: impl Fn(f64) -> f64) -> f64 {
    if slope(1.0) >= 0.0 {
        return 1.0;
    }
    if slope(0.0) <= 0.0 {
        return 0.0;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if slope(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn hard_min(z: &[f64]) -> f64 {
    z.iter().copied().fold(f64::INFINITY, f64::min)
}

/// The lp max-margin direction, within `tol` of the optimal margin.
pub fn max_margin_direction(data: &Dataset, p: f64, tol: f64) -> Result<MarginSolution> {
    max_margin_direction_with(
        data,
        p,
        &MarginOptions {
            tol,
            ..MarginOptions::default()
        },
    )
}

pub fn max_margin_direction_with(
    data: &Dataset,
    p: f64,
    opts: &MarginOptions,
) -> Result<MarginSolution> {
    let psi = Potential::new(p)?;
    let q = psi.q();
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(opts.tol > 0.0) {
        return Err(Error::Config(format!("tol must be positive, got {}", opts.tol)));
    }
    let n = data.len();
    let d = data.dim();
    let tol = opts.tol;

    let mut w = vec![0.0; d];
    match &opts.start {
        Some(s) => {
            data.check_dim(s.as_slice())?;
            let norm = s.lp_norm(p);
            if norm == 0.0 {
                return Err(Error::Config("start direction must be nonzero".into()));
            }
            w.iter_mut()
                .zip(s.as_slice())
                .for_each(|(o, v)| *o = v / norm);
        }
        None => {
            let mean = vec![1.0 / n as f64; n];
            let mut g = vec![0.0; d];
            transpose_matvec(data, &mean, &mut g);
            ball_oracle(&g, q, 1.0, &mut w);
        }
    }

    let mut z = vec![0.0; n];
    let mut zs = vec![0.0; n];
    let mut dz = vec![0.0; n];
    let mut lambda = vec![0.0; n];
    let mut g = vec![0.0; d];
    let mut s = vec![0.0; d];
    matvec(data, &w, &mut z);

    let spread = z.iter().copied().fold(f64::NEG_INFINITY, f64::max) - hard_min(&z);
    let mut tau = if spread > tol { spread } else { 1.0 };
    let log_n = (n as f64).ln();

    let mut best_dir = w.clone();
    let mut best_primal = f64::NEG_INFINITY;
    let mut best_dual = f64::INFINITY;
    let mut iters = 0usize;
    let mut fw_gap;

    let track_primal = |w: &[f64], z: &[f64], best_dir: &mut Vec<f64>, best: &mut f64| {
        let norm = lp_norm(w, p);
        if norm > 0.0 {
            let m = hard_min(z) / norm;
            if m > *best {
                *best = m;
                best_dir.iter_mut().zip(w).for_each(|(o, v)| *o = v / norm);
            }
        }
    };
    track_primal(&w, &z, &mut best_dir, &mut best_primal);

    let finish = |best_dir: Vec<f64>, iters: usize, gap: f64| -> Result<MarginSolution> {
        let direction = WeightVector::new(best_dir)?;
        let m = margin(data, &direction)?;
        if !(m > 0.0) {
            return Err(Error::NotSeparable { best_margin: m });
        }
        Ok(MarginSolution {
            direction,
            margin: m,
            iterations_used: iters,
            duality_gap_estimate: gap.max(0.0),
        })
    };

    'rounds: for _round in 0..opts.max_rounds {
        loop {
            soft_weights(&z, tau, &mut lambda);
            transpose_matvec(data, &lambda, &mut g);
            best_dual = best_dual.min(lp_norm(&g, q));
            let certified = best_dual - best_primal;
            if certified <= tol && best_primal > 0.0 {
                return finish(best_dir, iters, certified);
            }
            if best_dual <= tol && best_primal <= 0.0 {
                // The origin is (numerically) in the hull of the folded points.
                return Err(Error::NotSeparable {
                    best_margin: best_primal,
                });
            }
            ball_oracle(&g, q, 1.0, &mut s);
            matvec(data, &s, &mut zs);
            for ((o, a), b) in dz.iter_mut().zip(&z).zip(&zs) {
                *o = b - a;
            }
            fw_gap = dot(&lambda, &dz);
            if fw_gap <= 0.5 * tol {
                break;
            }
            if iters >= opts.max_iters {
                break 'rounds;
            }
            let step = concave_line_search(|gamma| soft_min_slope(&z, &dz, gamma, tau));
            for (wj, sj) in w.iter_mut().zip(&s) {
                *wj += step * (sj - *wj);
            }
            matvec(data, &w, &mut z);
            iters += 1;
            track_primal(&w, &z, &mut best_dir, &mut best_primal);
        }
        if tau * log_n <= 0.5 * tol && best_primal > 0.0 {
            let gap = (tau * log_n + fw_gap).min(best_dual - best_primal);
            return finish(best_dir, iters, gap);
        }
        tau *= 0.5;
    }
    if best_primal.is_finite() {
        let refined = barrier_refine(data, p, &best_dir, best_primal, tol, opts.max_newton);
        iters += refined.steps;
        if refined.primal > best_primal {
            best_primal = refined.primal;
            best_dir = refined.direction;
        }
        best_dual = best_dual.min(refined.dual);
        if best_dual - best_primal <= tol {
            return finish(best_dir, iters, best_dual - best_primal);
        }
    }
    timeout(data, best_dir, best_primal, best_dual, iters)
}

struct Refined {
    direction: Vec<f64>,
    primal: f64,
    dual: f64,
    steps: usize,
}

/// `|a + h|^p - |a|^p` without cancellation when `h` is small against `a`.
fn pow_change(a: f64, h: f64, p: f64) -> f64 {
    if a != 0.0 && (h / a) > -1.0 {
        a.abs().powf(p) * (p * (h / a).ln_1p()).exp_m1()
    } else {
        (a + h).abs().powf(p) - a.abs().powf(p)
    }
}

/// Change of the barrier objective `-t gamma - sum log s_i - log r` when
/// `x` moves by `step`, or `None` if the move leaves the feasible region.
/// Taking the difference term by term keeps it accurate when the objective
/// itself is of order `t`.
fn barrier_change(data: &Dataset, p: f64, t: f64, x: &[f64], r: f64, s: &[f64], step: &[f64]) -> Option<f64> {
    let d = data.dim();
    let (w, dw, dgamma) = (&x[..d], &step[..d], step[d]);
    let dr = -(0..d).map(|j| pow_change(w[j], dw[j], p)).sum::<f64>();
    if !(r + dr > 0.0) {
        return None;
    }
    let mut change = -t * dgamma - (dr / r).ln_1p();
    for (i, si) in s.iter().enumerate() {
        let ds = dot(data.folded_row(i), dw) - dgamma;
        if !(si + ds > 0.0) {
            return None;
        }
        change -= (ds / si).ln_1p();
    }
    Some(change)
}

fn barrier_refine(data: &Dataset, p: f64, start: &[f64], start_margin: f64, tol: f64, max_steps: usize) -> Refined {
    use nalgebra::{DMatrix, DVector};

    let n = data.len();
    let d = data.dim();
    let q = p / (p - 1.0);
    // Halving keeps r > 0; gamma sits strictly below the start's margin,
    // which may still be negative.
    let scale = start_margin.abs().max(1e-3);
    let mut x: Vec<f64> = start.iter().map(|v| 0.5 * v).collect();
    x.push(0.5 * start_margin - 0.25 * scale);
    let mut out = Refined {
        direction: start.to_vec(),
        primal: start_margin,
        dual: f64::INFINITY,
        steps: 0,
    };
    let mut t = (n + 1) as f64 / scale;
    let mut lambda = vec![0.0; n];
    let mut u = vec![0.0; d];
    let mut s = vec![0.0; n];
    while out.steps < max_steps {
        // Centering.
        let mut inner = 0;
        loop {
            let (w, gamma) = (&x[..d], x[d]);
            let r = 1.0 - w.iter().map(|v| v.abs().powf(p)).sum::<f64>();
            let mut g = DVector::<f64>::zeros(d + 1);
            let mut h = DMatrix::<f64>::zeros(d + 1, d + 1);
            for (i, si) in s.iter_mut().enumerate() {
                let z = data.folded_row(i);
                *si = dot(z, w) - gamma;
                let inv = 1.0 / *si;
                for a in 0..d {
                    g[a] -= z[a] * inv;
                    for b in 0..=a {
                        h[(a, b)] += z[a] * z[b] * inv * inv;
                    }
                    h[(d, a)] -= z[a] * inv * inv;
                }
                g[d] += inv;
                h[(d, d)] += inv * inv;
            }
            g[d] -= t;
            for a in 0..d {
                let m = w[a].abs().max(1e-12);
                let da = p * m.powf(p - 1.0).copysign(w[a]) / r;
                g[a] += da;
                h[(a, a)] += p * (p - 1.0) * m.powf(p - 2.0) / r;
                for b in 0..=a {
                    let m2 = w[b].abs().max(1e-12);
                    h[(a, b)] += da * p * m2.powf(p - 1.0).copysign(w[b]) / r;
                }
            }
            for a in 0..=d {
                for b in 0..a {
                    h[(b, a)] = h[(a, b)];
                }
            }
            out.steps += 1;
            inner += 1;
            // Coordinates no point touches leave the Hessian singular.
            let diag_max = (0..=d).map(|a| h[(a, a)]).fold(0.0f64, f64::max);
            let mut ridge = 0.0;
            let chol = loop {
                let mut hr = h.clone();
                for a in 0..=d {
                    hr[(a, a)] += ridge;
                }
                if let Some(c) = hr.cholesky() {
                    break Some(c);
                }
                ridge = if ridge == 0.0 { 1e-14 * (1.0 + diag_max) } else { ridge * 1e3 };
                if ridge > 1e-2 * (1.0 + diag_max) {
                    break None;
                }
            };
            let Some(chol) = chol else {
                out.steps = max_steps;
                break;
            };
            let step = chol.solve(&(-&g));
            let decrement = -g.dot(&step);
            if decrement <= 1e-10 || out.steps >= max_steps || inner >= 60 {
                break;
            }
            let mut alpha = 1.0;
            let mut moved = false;
            while alpha > 1e-12 {
                let trial: Vec<f64> = step.iter().map(|v| alpha * v).collect();
                if let Some(change) = barrier_change(data, p, t, &x, r, &s, &trial) {
                    if change <= -0.25 * alpha * decrement {
                        for (a, b) in x.iter_mut().zip(&trial) {
                            *a += b;
                        }
                        moved = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if !moved || decrement <= 1e-9 {
                break;
            }
        }
        // Certificate from the current point.
        let w = &x[..d];
        for (i, (l, si)) in lambda.iter_mut().zip(s.iter_mut()).enumerate() {
            *si = dot(data.folded_row(i), w) - x[d];
            *l = 1.0 / (t * *si);
        }
        transpose_matvec(data, &lambda, &mut u);
        let total: f64 = lambda.iter().sum();
        if total > 0.0 {
            out.dual = out.dual.min(lp_norm(&u, q) / total);
        }
        // The iterate itself, and the direction the multipliers point to.
        let from_dual: Vec<f64> = u.iter().map(|v| signed_pow(*v, q - 1.0)).collect();
        for cand in [w, &from_dual[..]] {
            let norm = lp_norm(cand, p);
            if norm > 0.0 {
                let m = (0..n).map(|i| dot(data.folded_row(i), cand)).fold(f64::INFINITY, f64::min) / norm;
                if m > out.primal {
                    out.primal = m;
                    out.direction = cand.iter().map(|v| v / norm).collect();
                }
            }
        }
        // Past this point rounding, not t, limits the central path.
        if out.dual - out.primal <= tol || t > 1e6 * (n + 1) as f64 / tol {
            break;
        }
        t *= 8.0;
    }
    out
}

fn timeout(
    data: &Dataset,
    best_dir: Vec<f64>,
    best_primal: f64,
    best_dual: f64,
    iters: usize,
) -> Result<MarginSolution> {
    if !(best_primal > 0.0) {
        return Err(Error::NotSeparable {
            best_margin: best_primal,
        });
    }
    let direction = WeightVector::new(best_dir)?;
    let m = margin(data, &direction)?;
    let gap = best_dual - best_primal;
    Err(Error::Timeout {
        iterations: iters,
        gap,
        best: Box::new(BestSoFar::Margin(MarginSolution {
            direction,
            margin: m,
            iterations_used: iters,
            duality_gap_estimate: gap,
        })),
    })
}

#[derive(Debug, Clone)]
pub struct RegPathOptions {
    /// Stop once the Frank–Wolfe gap is at most `tol` times the current loss.
    pub tol: f64,
    pub max_iters: usize,
    pub start: Option<WeightVector>,
}

impl Default for RegPathOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_REG_PATH_TOL,
            max_iters: 200_000,
            start: None,
        }
    }
}

fn loss_terms(loss: Loss, z: &[f64], value: &mut f64, slopes: &mut [f64]) {
    let n = z.len() as f64;
    *value = 0.0;
    for (s, &zi) in slopes.iter_mut().zip(z) {
        *value += loss.value(zi);
        *s = loss.derivative(zi) / n;
    }
    *value /= n;
}

/// `argmin_{||w||_p <= budget} L(w)` by Frank–Wolfe with exact line search.
pub fn regularization_path_point(
    loss: Loss,
    data: &Dataset,
    p: f64,
    budget: f64,
    tol: f64,
) -> Result<RegPathPoint> {
    regularization_path_point_with(
        loss,
        data,
        p,
        budget,
        &RegPathOptions {
            tol,
            ..RegPathOptions::default()
        },
    )
}

pub fn regularization_path_point_with(
    loss: Loss,
    data: &Dataset,
    p: f64,
    budget: f64,
    opts: &RegPathOptions,
) -> Result<RegPathPoint> {
    let psi = Potential::new(p)?;
    let q = psi.q();
    if !(budget > 0.0) || !budget.is_finite() {
        return Err(Error::Config(format!("budget must be positive, got {budget}")));
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = data.len();
    let d = data.dim();
    let mut w = vec![0.0; d];
    if let Some(s) = &opts.start {
        data.check_dim(s.as_slice())?;
        let norm = s.lp_norm(p);
        let shrink = if norm > budget { budget / norm } else { 1.0 };
        w.iter_mut()
            .zip(s.as_slice())
            .for_each(|(o, v)| *o = v * shrink);
    }

    let mut z = vec![0.0; n];
    let mut zs = vec![0.0; n];
    let mut dz = vec![0.0; n];
    let mut slopes = vec![0.0; n];
    let mut g = vec![0.0; d];
    let mut s = vec![0.0; d];
    let mut value = 0.0;
    let mut iters = 0usize;

    loop {
        matvec(data, &w, &mut z);
        if loss == Loss::Exponential {
            if let Some(&zi) = z.iter().find(|&&zi| zi < EXP_OVERFLOW_SCORE) {
                return Err(Error::LossOverflow { margin: zi });
            }
        }
        loss_terms(loss, &z, &mut value, &mut slopes);
        transpose_matvec(data, &slopes, &mut g);
        // Minimizing: move toward the oracle answer for -g.
        ball_oracle(&g, q, budget, &mut s);
        s.iter_mut().for_each(|v| *v = -*v);
        let gap = dot(&g, &w) - dot(&g, &s);
        if gap <= opts.tol * value {
            return Ok(RegPathPoint {
                budget,
                minimizer: WeightVector::new(w)?,
                loss_value: value,
                iterations_used: iters,
                fw_gap: gap.max(0.0),
            });
        }
        if iters >= opts.max_iters {
            return Err(Error::Timeout {
                iterations: iters,
                gap,
                best: Box::new(BestSoFar::RegPath(RegPathPoint {
                    budget,
                    minimizer: WeightVector::new(w)?,
                    loss_value: value,
                    iterations_used: iters,
                    fw_gap: gap,
                })),
            });
        }
        matvec(data, &s, &mut zs);
        for ((o, a), b) in dz.iter_mut().zip(&z).zip(&zs) {
            *o = b - a;
        }
        // The line objective is convex; maximize its negation.
        let step = concave_line_search(|gamma| {
            -z.iter()
                .zip(&dz)
                .map(|(a, b)| loss.derivative(a + gamma * b) * b)
                .sum::<f64>()
        });
        for (wj, sj) in w.iter_mut().zip(&s) {
            *wj += step * (sj - *wj);
        }
        iters += 1;
    }
}

/// Distances `||w(B)/B - w_hat||_p` between the normalized regularization path
/// and the max-margin direction, one per budget.
#[derive(Debug, Clone, PartialEq)]
pub struct RegPathReport {
    pub p: f64,
    pub budgets: Vec<f64>,
    pub distances: Vec<f64>,
    pub margin: f64,
    pub direction: WeightVector,
}

impl RegPathReport {
    /// Distances never increase along the (increasing) budgets.
    pub fn is_monotone(&self) -> bool {
        self.distances.windows(2).all(|w| w[1] <= w[0])
    }

    pub fn final_distance(&self) -> Option<f64> {
        self.distances.last().copied()
    }

    /// `{p, budgets, distances, margin, direction}`.
    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "p": self.p,
            "budgets": self.budgets,
            "distances": self.distances,
            "margin": self.margin,
            "direction": self.direction.as_slice(),
        })
    }
}

/// Solves the regularization path at each budget (warm-started from the
/// previous budget) and measures its distance to the max-margin direction.
pub fn verify_reg_equals_margin(
    loss: Loss,
    data: &Dataset,
    p: f64,
    budgets: &[f64],
    tol: f64,
) -> Result<RegPathReport> {
    if budgets.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("budgets must be strictly increasing".into()));
    }
    let oracle = max_margin_direction(data, p, DEFAULT_MARGIN_TOL.min(tol))?;
    let mut distances = Vec::with_capacity(budgets.len());
    let mut start: Option<WeightVector> = None;
    for &b in budgets {
        let opts = RegPathOptions {
            tol,
            start: start.take(),
            ..RegPathOptions::default()
        };
        let point = regularization_path_point_with(loss, data, p, b, &opts)?;
        let scaled: Vec<f64> = point.minimizer.as_slice().iter().map(|v| v / b).collect();
        distances.push(lp_distance(&scaled, oracle.direction.as_slice(), p));
        start = Some(point.minimizer);
    }
    Ok(RegPathReport {
        p,
        budgets: budgets.to_vec(),
        distances,
        margin: oracle.margin,
        direction: oracle.direction,
    })
}
