//! The mirror potential `psi(w) = (1/p) ||w||_p^p`, its mirror map and the
//! induced Bregman divergence.
//!
//! The potential is separable: `grad psi(w)_j = sign(w_j) |w_j|^(p-1)`, so the
//! mirror map and its inverse act on each coordinate independently. `sign(0)`
//! is taken to be zero, which makes the pair a bijection of `R^d`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norm::{dot, lp_norm, lp_norm_pow, max_abs, signed_pow};

/// Dual magnitudes above this threshold trigger a precision warning.
pub const DUAL_MAGNITUDE_WARNING: f64 = 1e12;

/// Range of exponents where the optimizer is known to behave well.
pub const ADVISORY_P_RANGE: (f64, f64) = (1.1, 10.0);

/// A dense parameter vector with finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if let Some(index) = coords.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self(coords))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn lp_norm(&self, p: f64) -> f64 {
        lp_norm(&self.0, p)
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.0.iter().map(|v| v * c).collect())
    }

    /// `self / ||self||_p`; `None` for the zero vector.
    pub fn normalized(&self, p: f64) -> Option<Self> {
        let n = self.lp_norm(p);
        (n > 0.0).then(|| Self(self.0.iter().map(|v| v / n).collect()))
    }

    pub(crate) fn from_finite(coords: Vec<f64>) -> Self {
        debug_assert!(coords.iter().all(|v| v.is_finite()));
        Self(coords)
    }
}

impl TryFrom<Vec<f64>> for WeightVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<WeightVector> for Vec<f64> {
    fn from(w: WeightVector) -> Self {
        w.0
    }
}

impl AsRef<[f64]> for WeightVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// `psi(w) = (1/p) ||w||_p^p` for a fixed exponent `p > 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Potential {
    p: f64,
    q: f64,
}

impl Potential {
    pub fn new(p: f64) -> Result<Self> {
        // p = 1 loses strict convexity and the Bregman divergence degenerates.
        if !p.is_finite() || p <= 1.0 {
            return Err(Error::InvalidExponent(p));
        }
        if p < ADVISORY_P_RANGE.0 || p > ADVISORY_P_RANGE.1 {
            log::debug!(
                "p = {p} is outside the advisory range [{}, {}]",
                ADVISORY_P_RANGE.0,
                ADVISORY_P_RANGE.1
            );
        }
        Ok(Self { p, q: p / (p - 1.0) })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// Dual exponent, `1/p + 1/q = 1`.
    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn value(&self, w: &WeightVector) -> f64 {
        self.value_slice(w.as_slice())
    }

    pub(crate) fn value_slice(&self, w: &[f64]) -> f64 {
        lp_norm_pow(w, self.p) / self.p
    }

    /// `grad psi(w)`, componentwise `sign(w_j) |w_j|^(p-1)`.
    pub fn mirror_map(&self, w: &WeightVector) -> Result<WeightVector> {
        let mut out = vec![0.0; w.dim()];
        self.mirror_into(w.as_slice(), &mut out);
        WeightVector::new(out)
    }

    /// Inverse of [`Potential::mirror_map`], componentwise `sign(z_j) |z_j|^(1/(p-1))`.
    pub fn inverse_mirror_map(&self, z: &WeightVector) -> Result<WeightVector> {
        if max_abs(z.as_slice()) > DUAL_MAGNITUDE_WARNING {
            log::warn!(
                "dual magnitude exceeds {DUAL_MAGNITUDE_WARNING:e} at p = {}; precision loss likely",
                self.p
            );
        }
        let mut out = vec![0.0; z.dim()];
        self.inverse_into(z.as_slice(), &mut out);
        WeightVector::new(out)
    }

    #[inline]
    pub(crate) fn mirror_into(&self, w: &[f64], out: &mut [f64]) {
        let e = self.p - 1.0;
        for (o, &v) in out.iter_mut().zip(w) {
            *o = signed_pow(v, e);
        }
    }

    #[inline]
    pub(crate) fn inverse_into(&self, z: &[f64], out: &mut [f64]) {
        let e = 1.0 / (self.p - 1.0);
        for (o, &v) in out.iter_mut().zip(z) {
            *o = signed_pow(v, e);
        }
    }

    /// `D(x, y) = psi(x) - psi(y) - <grad psi(y), x - y>`.
    pub fn bregman(&self, x: &WeightVector, y: &WeightVector) -> Result<f64> {
        if x.dim() != y.dim() {
            return Err(Error::Shape {
                expected: x.dim(),
                got: y.dim(),
            });
        }
        Ok(self.bregman_slice(x.as_slice(), y.as_slice()))
    }

    /// Sum of the one-dimensional divergences; each is non-negative, so
    /// rounding is clipped per coordinate.
    pub(crate) fn bregman_slice(&self, x: &[f64], y: &[f64]) -> f64 {
        let p = self.p;
        x.iter()
            .zip(y)
            .map(|(&a, &b)| {
                let pa = if a == 0.0 { 0.0 } else { a.abs().powf(p) };
                let pb = if b == 0.0 { 0.0 } else { b.abs().powf(p) };
                let gb = signed_pow(b, p - 1.0);
                (pa / p - pb / p - gb * (a - b)).max(0.0)
            })
            .sum()
    }

    /// `||grad psi(w)||_q`, which equals `||w||_p^(p-1)`.
    pub fn dual_norm_of_gradient(&self, w: &WeightVector) -> Result<f64> {
        let g = self.mirror_map(w)?;
        Ok(lp_norm(g.as_slice(), self.q))
    }
}

impl TryFrom<f64> for Potential {
    type Error = Error;

    fn try_from(p: f64) -> Result<Self> {
        Self::new(p)
    }
}

impl From<Potential> for f64 {
    fn from(psi: Potential) -> Self {
        psi.p
    }
}

/// Inner product of two weight vectors of equal dimension.
pub fn inner(a: &WeightVector, b: &WeightVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(dot(a.as_slice(), b.as_slice()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wv(v: &[f64]) -> WeightVector {
        WeightVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn rejects_p_at_or_below_one() {
        assert!(matches!(Potential::new(1.0), Err(Error::InvalidExponent(_))));
        assert!(Potential::new(0.5).is_err());
        assert!(Potential::new(f64::NAN).is_err());
        assert!(Potential::new(f64::INFINITY).is_err());
        assert!(Potential::new(1.0 + 1e-9).is_ok());
    }

    #[test]
    fn dual_exponent() {
        for p in [1.1, 1.5, 2.0, 3.0, 10.0] {
            let psi = Potential::new(p).unwrap();
            assert!((1.0 / psi.p() + 1.0 / psi.q() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_weights_rejected() {
        assert!(matches!(
            WeightVector::new(vec![1.0, f64::NAN]),
            Err(Error::NonFinite { index: 1 })
        ));
        assert!(WeightVector::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn mirror_map_examples() {
        let p2 = Potential::new(2.0).unwrap();
        assert_eq!(p2.mirror_map(&wv(&[3.0, -1.0])).unwrap(), wv(&[3.0, -1.0]));
        let p3 = Potential::new(3.0).unwrap();
        assert_eq!(
            p3.mirror_map(&wv(&[2.0, -1.0, 0.0])).unwrap(),
            wv(&[4.0, -1.0, 0.0])
        );
        let p15 = Potential::new(1.5).unwrap();
        assert_eq!(p15.mirror_map(&wv(&[4.0])).unwrap(), wv(&[2.0]));
    }

    #[test]
    fn inverse_mirror_map_examples() {
        let p3 = Potential::new(3.0).unwrap();
        assert_eq!(
            p3.inverse_mirror_map(&wv(&[4.0, -1.0, 0.0])).unwrap(),
            wv(&[2.0, -1.0, 0.0])
        );
        let p2 = Potential::new(2.0).unwrap();
        assert_eq!(p2.inverse_mirror_map(&wv(&[0.7])).unwrap(), wv(&[0.7]));
        for p in [1.1, 1.5, 3.0, 10.0] {
            let psi = Potential::new(p).unwrap();
            assert_eq!(psi.inverse_mirror_map(&wv(&[0.0; 4])).unwrap(), wv(&[0.0; 4]));
        }
    }

    #[test]
    fn bregman_examples() {
        let p2 = Potential::new(2.0).unwrap();
        assert_eq!(p2.bregman(&wv(&[1.0, 0.0]), &wv(&[0.0, 0.0])).unwrap(), 0.5);
        for p in [1.1, 2.0, 3.0, 6.0] {
            let psi = Potential::new(p).unwrap();
            let x = wv(&[0.3, -0.8]);
            assert_eq!(psi.bregman(&x, &x).unwrap(), 0.0);
        }
    }

    #[test]
    fn bregman_p3_matches_finite_difference_expansion() {
        // Independent route: gradient of psi by central differences.
        let p = 3.0;
        let psi_fn = |v: &[f64]| v.iter().map(|a| a.abs().powf(p)).sum::<f64>() / p;
        let x = [1.0, 0.0];
        let y = [0.0, 1.0];
        let h = 1e-6;
        let mut grad = [0.0; 2];
        for j in 0..2 {
            let mut up = y;
            let mut dn = y;
            up[j] += h;
            dn[j] -= h;
            grad[j] = (psi_fn(&up) - psi_fn(&dn)) / (2.0 * h);
        }
        let fd = psi_fn(&x) - psi_fn(&y) - (grad[0] * (x[0] - y[0]) + grad[1] * (x[1] - y[1]));
        assert!((fd - 1.0).abs() < 1e-8);

        let psi = Potential::new(p).unwrap();
        let d = psi.bregman(&wv(&x), &wv(&y)).unwrap();
        assert!((d - 1.0).abs() < 1e-15, "{d}");
    }

    #[test]
    fn bregman_shape_mismatch() {
        let psi = Potential::new(2.0).unwrap();
        assert!(matches!(
            psi.bregman(&wv(&[1.0]), &wv(&[1.0, 2.0])),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn dual_norm_examples() {
        let p2 = Potential::new(2.0).unwrap();
        assert!((p2.dual_norm_of_gradient(&wv(&[3.0, 4.0])).unwrap() - 5.0).abs() < 1e-15);
        let p3 = Potential::new(3.0).unwrap();
        let got = p3.dual_norm_of_gradient(&wv(&[1.0, 1.0])).unwrap();
        assert!((got - 2f64.powf(2.0 / 3.0)).abs() < 1e-14);
    }

    #[test]
    fn dual_norm_p15_matches_direct_q_norm() {
        let w = wv(&[0.3, -1.2, 2.5, 0.0, -0.01, 4.0, 1.0, -3.3, 0.7, 0.05]);
        let psi = Potential::new(1.5).unwrap();
        // q = 3; direct evaluation of (sum |w_j|^{(p-1) q})^{1/q}.
        let direct: f64 = w
            .as_slice()
            .iter()
            .map(|v| v.abs().powf(0.5).powi(3))
            .sum::<f64>()
            .powf(1.0 / 3.0);
        let got = psi.dual_norm_of_gradient(&w).unwrap();
        assert!((got - direct).abs() <= 1e-12 * direct);
        let closed = w.lp_norm(1.5).powf(0.5);
        assert!((got - closed).abs() <= 1e-10 * closed);
    }

    #[test]
    fn serde_rejects_bad_values() {
        assert!(serde_json::from_str::<Potential>("0.9").is_err());
        let psi: Potential = serde_json::from_str("3.0").unwrap();
        assert_eq!(psi.q(), 1.5);
        let w: WeightVector = serde_json::from_str("[1.0, -2.0]").unwrap();
        assert_eq!(w.dim(), 2);
    }
}
