//! Small dense-vector kernels shared by every module.
//!
//! Norms are computed with max-factoring, `m * (sum |x_j / m|^p)^(1/p)` with
//! `m = max |x_j|`, so iterates whose norm grows without bound never overflow
//! the intermediate power sum.

/// `sign(x) * |x|^e`, with the zero coordinate mapped to zero.
#[inline]
pub fn signed_pow(x: f64, e: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x.abs().powf(e).copysign(x)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn max_abs(x: &[f64]) -> f64 {
    x.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// The lp norm for `p >= 1`, including `p = f64::INFINITY`.
pub fn lp_norm(x: &[f64], p: f64) -> f64 {
    let m = max_abs(x);
    if m == 0.0 || p == f64::INFINITY {
        return m;
    }
    if p == 1.0 {
        return x.iter().map(|v| v.abs()).sum();
    }
    let s: f64 = x.iter().map(|v| (v.abs() / m).powf(p)).sum();
    m * s.powf(1.0 / p)
}

/// `sum_j |x_j|^p`, the unscaled p-th power of the norm.
pub fn lp_norm_pow(x: &[f64], p: f64) -> f64 {
    x.iter()
        .map(|v| if *v == 0.0 { 0.0 } else { v.abs().powf(p) })
        .sum()
}

/// `lp_norm(a - b, p)` without allocating.
pub fn lp_distance(a: &[f64], b: &[f64], p: f64) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    lp_norm(&diff, p)
}
