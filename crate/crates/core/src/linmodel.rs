//! Classification losses and the empirical objective of a linear model.
//!
//! Labels are folded into the features (`(x_i, y_i) -> (y_i x_i, +1)`) when a
//! [`Dataset`] is built, so every kernel below works with signed scores
//! `z_i = y_i <w, x_i>`. The original labels stay available for reporting and
//! serialization.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt::fmt_f64;
use crate::norm::{dot, lp_norm};
use crate::potential::WeightVector;

/// Scores below this make `exp(-z)` overflow.
pub const EXP_OVERFLOW_SCORE: f64 = -700.0;

/// A decreasing, convex loss whose infimum 0 is never attained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    /// `exp(-z)`
    #[serde(alias = "exp")]
    Exponential,
    /// `log(1 + exp(-z))`
    Logistic,
}

impl Loss {
    pub fn value(&self, z: f64) -> f64 {
        match self {
            Loss::Exponential => {
                if z < EXP_OVERFLOW_SCORE {
                    f64::MAX
                } else {
                    (-z).exp()
                }
            }
            Loss::Logistic => softplus(-z),
        }
    }

    pub fn derivative(&self, z: f64) -> f64 {
        match self {
            Loss::Exponential => -self.value(z),
            // -sigmoid(-z), written so that neither branch overflows.
            Loss::Logistic => {
                if z >= 0.0 {
                    let e = (-z).exp();
                    -e / (1.0 + e)
                } else {
                    -1.0 / (1.0 + z.exp())
                }
            }
        }
    }

    /// Constants `(a, b)` with `lim_{z -> inf} loss(z) e^{a z} = b`.
    pub fn tail_constants(&self) -> (f64, f64) {
        match self {
            Loss::Exponential | Loss::Logistic => (1.0, 1.0),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Loss::Exponential => "exp",
            Loss::Logistic => "logistic",
        }
    }
}

impl std::str::FromStr for Loss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exp" | "exponential" => Ok(Loss::Exponential),
            "logistic" => Ok(Loss::Logistic),
            other => Err(Error::Config(format!("unknown loss `{other}`"))),
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Labeled points `(x_i, y_i)` with `y_i` in `{+1, -1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<f64>,
    folded: Vec<f64>,
}

impl Dataset {
    /// Builds a dataset from row-major features.
    pub fn new(dim: usize, features: Vec<Vec<f64>>, labels: Vec<f64>) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::Shape {
                expected: features.len(),
                got: labels.len(),
            });
        }
        let mut flat = Vec::with_capacity(features.len() * dim);
        for row in &features {
            if row.len() != dim {
                return Err(Error::Shape {
                    expected: dim,
                    got: row.len(),
                });
            }
            if let Some(index) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { index });
            }
            flat.extend_from_slice(row);
        }
        if let Some(bad) = labels.iter().find(|&&y| y != 1.0 && y != -1.0) {
            return Err(Error::InvalidLabel(*bad));
        }
        let folded = flat
            .chunks_exact(dim.max(1))
            .zip(&labels)
            .flat_map(|(row, &y)| row.iter().map(move |v| y * v))
            .collect();
        Ok(Self {
            dim,
            features: flat,
            labels,
            folded,
        })
    }

    /// All points labeled `+1`.
    pub fn positive(dim: usize, features: Vec<Vec<f64>>) -> Result<Self> {
        let n = features.len();
        Self::new(dim, features, vec![1.0; n])
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

    pub fn point(&self, i: usize) -> (&[f64], f64) {
        (&self.features[i * self.dim..(i + 1) * self.dim], self.labels[i])
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    /// `y_i x_i`.
    pub fn folded_row(&self, i: usize) -> &[f64] {
        &self.folded[i * self.dim..(i + 1) * self.dim]
    }

    /// `max_i ||x_i||_q`.
    pub fn c_bound(&self, q: f64) -> f64 {
        (0..self.len())
            .map(|i| lp_norm(self.point(i).0, q))
            .fold(0.0, f64::max)
    }

    /// Every point multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        let rows = (0..self.len())
            .map(|i| self.point(i).0.iter().map(|v| v * c).collect())
            .collect();
        Self::new(self.dim, rows, self.labels.clone())
    }

    pub(crate) fn check_dim(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.dim {
            return Err(Error::Shape {
                expected: self.dim,
                got: w.len(),
            });
        }
        Ok(())
    }

    /// Signed scores `y_i <x_i, w>`.
    pub fn scores(&self, w: &WeightVector) -> Result<Vec<f64>> {
        self.check_dim(w.as_slice())?;
        Ok(self.scores_slice(w.as_slice()))
    }

    pub(crate) fn scores_slice(&self, w: &[f64]) -> Vec<f64> {
        (0..self.len()).map(|i| dot(self.folded_row(i), w)).collect()
    }

    /// CSV with header `x_1,...,x_d,y`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> = (1..=self.dim).map(|j| format!("x_{j}")).collect();
        out.push_str(&header.join(","));
        out.push_str(",y\n");
        for i in 0..self.len() {
            let (x, y) = self.point(i);
            for v in x {
                out.push_str(&fmt_f64(*v));
                out.push(',');
            }
            let _ = writeln!(out, "{}", if y > 0.0 { "1" } else { "-1" });
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("missing header".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.last() != Some(&"y") {
            return Err(Error::Parse("last column must be `y`".into()));
        }
        let dim = cols.len() - 1;
        for (j, c) in cols[..dim].iter().enumerate() {
            if *c != format!("x_{}", j + 1) {
                return Err(Error::Parse(format!("unexpected column `{c}`")));
            }
        }
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let vals = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse(format!("row {}: {e}", lineno + 1)))?;
            if vals.len() != dim + 1 {
                return Err(Error::Shape {
                    expected: dim + 1,
                    got: vals.len(),
                });
            }
            labels.push(vals[dim]);
            rows.push(vals[..dim].to_vec());
        }
        Self::new(dim, rows, labels)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

/// Accumulates `L(w)` and `grad L(w)` over a subset of rows in one pass.
///
/// Rows are visited in the order given, so callers that need bit-identical
/// results across code paths must pass rows in the same order.
pub(crate) fn loss_and_grad_rows(
    loss: Loss,
    data: &Dataset,
    w: &[f64],
    rows: impl Iterator<Item = usize>,
    grad: &mut [f64],
) -> Result<f64> {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut total = 0.0;
    let mut count = 0usize;
    for i in rows {
        let x = data.folded_row(i);
        let z = dot(x, w);
        let (value, slope) = match loss {
            Loss::Exponential => {
                if z < EXP_OVERFLOW_SCORE {
                    return Err(Error::LossOverflow { margin: z });
                }
                let e = (-z).exp();
                (e, -e)
            }
            Loss::Logistic => (loss.value(z), loss.derivative(z)),
        };
        total += value;
        for (g, xj) in grad.iter_mut().zip(x) {
            *g += slope * xj;
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    let inv = 1.0 / count as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok(total * inv)
}

pub(crate) fn loss_rows(
    loss: Loss,
    data: &Dataset,
    w: &[f64],
    rows: impl Iterator<Item = usize>,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for i in rows {
        let z = dot(data.folded_row(i), w);
        if loss == Loss::Exponential && z < EXP_OVERFLOW_SCORE {
            return Err(Error::LossOverflow { margin: z });
        }
        total += match loss {
            Loss::Exponential => (-z).exp(),
            Loss::Logistic => loss.value(z),
        };
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(total / count as f64)
}

/// `L(w) = (1/n) sum_i loss(y_i <w, x_i>)`.
pub fn empirical_loss(loss: Loss, data: &Dataset, w: &WeightVector) -> Result<f64> {
    data.check_dim(w.as_slice())?;
    loss_rows(loss, data, w.as_slice(), 0..data.len())
}

/// `grad L(w) = (1/n) sum_i loss'(y_i <w, x_i>) y_i x_i`.
pub fn loss_gradient(loss: Loss, data: &Dataset, w: &WeightVector) -> Result<WeightVector> {
    data.check_dim(w.as_slice())?;
    let mut grad = vec![0.0; data.dim()];
    loss_and_grad_rows(loss, data, w.as_slice(), 0..data.len(), &mut grad)?;
    WeightVector::new(grad)
}

pub(crate) fn margin_slice(data: &Dataset, w: &[f64]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok((0..data.len())
        .map(|i| dot(data.folded_row(i), w))
        .fold(f64::INFINITY, f64::min))
}

/// `min_i y_i <x_i, w>`; negative when `w` misclassifies a point.
pub fn margin(data: &Dataset, w: &WeightVector) -> Result<f64> {
    data.check_dim(w.as_slice())?;
    margin_slice(data, w.as_slice())
}

/// `w / margin(w)`, the classifier rescaled to margin exactly one.
pub fn rescale_to_unit_margin(data: &Dataset, w: &WeightVector) -> Result<WeightVector> {
    let m = margin(data, w)?;
    if !(m > 0.0) {
        return Err(Error::NotSeparating { margin: m });
    }
    if m == 1.0 {
        return Ok(w.clone());
    }
    w.scaled(1.0 / m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wv(v: &[f64]) -> WeightVector {
        WeightVector::new(v.to_vec()).unwrap()
    }

    fn pair() -> Dataset {
        Dataset::positive(2, vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()
    }

    #[test]
    fn loss_at_zero() {
        let data = pair();
        let l = empirical_loss(Loss::Exponential, &data, &wv(&[0.0, 0.0])).unwrap();
        assert_eq!(l, 1.0);
        let l = empirical_loss(Loss::Logistic, &data, &wv(&[0.0, 0.0])).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn single_point_exponential_loss() {
        let data = Dataset::positive(2, vec![vec![1.0, 0.0]]).unwrap();
        let l = empirical_loss(Loss::Exponential, &data, &wv(&[2f64.ln(), 5.0])).unwrap();
        assert!((l - 0.5).abs() < 1e-15);
    }

    #[test]
    fn gradient_at_origin_single_point() {
        let data = Dataset::positive(1, vec![vec![1.0]]).unwrap();
        let g = loss_gradient(Loss::Exponential, &data, &wv(&[0.0])).unwrap();
        assert_eq!(g, wv(&[-1.0]));
    }

    #[test]
    fn gradient_vanishes_far_along_separator() {
        let data = pair();
        let g = loss_gradient(Loss::Exponential, &data, &wv(&[30.0, 30.0])).unwrap();
        assert!(g.lp_norm(2.0) < 1e-6);
    }

    #[test]
    fn margin_examples() {
        let data = pair();
        assert_eq!(margin(&data, &wv(&[1.0, 1.0])).unwrap(), 1.0);
        assert_eq!(margin(&data, &wv(&[1.0, -1.0])).unwrap(), -1.0);
        assert_eq!(margin(&data, &wv(&[0.0, 0.0])).unwrap(), 0.0);
    }

    #[test]
    fn margin_of_empty_dataset_is_an_error() {
        let data = Dataset::new(2, vec![], vec![]).unwrap();
        assert!(matches!(margin(&data, &wv(&[1.0, 1.0])), Err(Error::EmptyDataset)));
    }

    #[test]
    fn rescale_examples() {
        let data = pair();
        let w = wv(&[2.0, 3.0]);
        assert_eq!(rescale_to_unit_margin(&data, &w).unwrap(), wv(&[1.0, 1.5]));
        let w = wv(&[1.0, 4.0]);
        assert_eq!(rescale_to_unit_margin(&data, &w).unwrap(), w);
        assert!(matches!(
            rescale_to_unit_margin(&data, &wv(&[1.0, -1.0])),
            Err(Error::NotSeparating { .. })
        ));
    }

    #[test]
    fn shape_errors() {
        let data = pair();
        assert!(matches!(
            empirical_loss(Loss::Exponential, &data, &wv(&[1.0])),
            Err(Error::Shape { .. })
        ));
        assert!(Dataset::new(2, vec![vec![1.0]], vec![1.0]).is_err());
        assert!(matches!(
            Dataset::new(1, vec![vec![1.0]], vec![0.5]),
            Err(Error::InvalidLabel(_))
        ));
    }

    #[test]
    fn exponential_overflow_is_reported() {
        let data = Dataset::positive(1, vec![vec![1.0]]).unwrap();
        assert!(matches!(
            empirical_loss(Loss::Exponential, &data, &wv(&[-800.0])),
            Err(Error::LossOverflow { .. })
        ));
        assert_eq!(Loss::Exponential.value(-800.0), f64::MAX);
        // The logistic loss stays finite in the same regime.
        assert!((Loss::Logistic.value(-800.0) - 800.0).abs() < 1e-9);
    }

    #[test]
    fn labels_fold_into_features() {
        let data = Dataset::new(2, vec![vec![1.0, 2.0], vec![3.0, -1.0]], vec![1.0, -1.0]).unwrap();
        assert_eq!(data.folded_row(1), &[-3.0, 1.0]);
        assert_eq!(data.point(1), (&[3.0, -1.0][..], -1.0));
        assert_eq!(data.c_bound(1.0), 4.0);
    }

    #[test]
    fn csv_round_trip() {
        let data = Dataset::new(
            2,
            vec![vec![0.1, -2.5], vec![1.0 / 3.0, 7.0]],
            vec![1.0, -1.0],
        )
        .unwrap();
        let text = data.to_csv();
        assert!(text.starts_with("x_1,x_2,y\n"));
        let back = Dataset::from_csv(&text).unwrap();
        assert_eq!(back, data);
        assert_eq!(back.to_csv(), text);
    }

    #[test]
    fn csv_rejects_bad_header() {
        assert!(Dataset::from_csv("a,b,y\n1,2,1\n").is_err());
        assert!(Dataset::from_csv("x_1,label\n1,1\n").is_err());
    }
}
