//! Seeded generators for the synthetic classification fixtures.
//!
//! Every generator draws from a ChaCha stream seeded with the spec's seed, so a
//! `(kind, seed, params)` triple always produces byte-identical CSV. Each
//! dataset is checked for linear separability with the max-margin oracle
//! before it is returned.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linmodel::Dataset;
use crate::norm::dot;
use crate::oracle::max_margin_direction;
use crate::potential::WeightVector;

/// Points that fix the lp max-margin direction of the planar fixture at
/// `2^(-1/p) (1, 1)` for every p (they lie on the line `x_1 + x_2 = 2/3`).
pub const R2_ANCHORS: [[f64; 2]; 3] = [[1.0 / 6.0, 0.5], [0.5, 1.0 / 6.0], [1.0 / 3.0, 1.0 / 3.0]];
pub const R2_EXTRA_POINTS: usize = 12;
pub const R2_CENTER: [f64; 2] = [0.5, 0.5];
/// The extra planar points are drawn from `N(center, 0.15 I)`.
pub const R2_NOISE_VARIANCE: f64 = 0.15;

pub const R100_DIM: usize = 100;
pub const R100_COUNT: usize = 15;
pub const R100_MAX_SUPPORT: usize = 10;
pub const R100_RANGE: (f64, f64) = (-2.0, 4.0);

/// Initial iterate scale for the planar fixture: `w0 ~ N(0, I)`.
pub const R2_INIT_STD: f64 = 1.0;
/// Initial iterate scale for the sparse fixture: `w0 ~ N(0, 0.1 I)`.
pub const R100_INIT_VARIANCE: f64 = 0.1;

const MAX_RETRIES: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    R2Anchored,
    R100Sparse,
    SymmetricPair,
    RandomSeparable,
}

impl std::str::FromStr for GeneratorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "r2_anchored" => Ok(Self::R2Anchored),
            "r100_sparse" => Ok(Self::R100Sparse),
            "symmetric_pair" => Ok(Self::SymmetricPair),
            "random_separable" => Ok(Self::RandomSeparable),
            other => Err(Error::Config(format!("unknown generator `{other}`"))),
        }
    }
}

/// Kind-specific knobs; unset fields take the fixture defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparsity: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub params: GeneratorParams,
}

impl GeneratorSpec {
    pub fn new(kind: GeneratorKind, seed: u64) -> Self {
        Self {
            kind,
            seed,
            params: GeneratorParams::default(),
        }
    }

    pub fn generate(&self) -> Result<Dataset> {
        match self.kind {
            GeneratorKind::R2Anchored => gen_r2_anchored_with(
                self.seed,
                self.params.noise_scale.unwrap_or(R2_NOISE_VARIANCE.sqrt()),
            ),
            GeneratorKind::R100Sparse => gen_sparse(
                self.seed,
                self.params.dim.unwrap_or(R100_DIM),
                self.params.count.unwrap_or(R100_COUNT),
                self.params.sparsity.unwrap_or(R100_MAX_SUPPORT),
            ),
            GeneratorKind::SymmetricPair => Ok(gen_symmetric_pair()),
            GeneratorKind::RandomSeparable => gen_random_separable(
                self.seed,
                self.params.count.unwrap_or(20),
                self.params.dim.unwrap_or(5),
                self.params.noise_scale.unwrap_or(0.1),
            ),
        }
    }

    /// Standard deviation of the Gaussian initial iterate for this fixture.
    pub fn init_std(&self) -> f64 {
        match self.kind {
            GeneratorKind::R100Sparse => R100_INIT_VARIANCE.sqrt(),
            _ => R2_INIT_STD,
        }
    }

    /// Provenance sidecar written next to generated CSV files.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("generator spec serializes")
    }
}

fn verify_separable(data: &Dataset) -> Result<()> {
    match max_margin_direction(data, 2.0, 1e-4) {
        Ok(_) => Ok(()),
        Err(Error::Timeout { best, .. }) => match *best {
            crate::error::BestSoFar::Margin(m) if m.margin > 0.0 => Ok(()),
            _ => Err(Error::Generation("separability check did not converge".into())),
        },
        Err(e) => Err(Error::Generation(format!("not separable: {e}"))),
    }
}

/// The planar fixture: the three anchors followed by 12 Gaussian points.
pub fn gen_r2_anchored(seed: u64) -> Result<Dataset> {
    gen_r2_anchored_with(seed, R2_NOISE_VARIANCE.sqrt())
}

/// Draws the 12 extra points wholesale until every one lies strictly beyond
/// the anchors' line `x_1 + x_2 = 2/3`, so the anchors alone define the margin.
pub fn gen_r2_anchored_with(seed: u64, noise_std: f64) -> Result<Dataset> {
    let normal = Normal::new(0.0, noise_std)
        .map_err(|e| Error::Generation(format!("bad noise scale {noise_std}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anchor_level = 2.0 / 3.0;
    for _ in 0..MAX_RETRIES {
        let extra: Vec<Vec<f64>> = (0..R2_EXTRA_POINTS)
            .map(|_| {
                vec![
                    R2_CENTER[0] + normal.sample(&mut rng),
                    R2_CENTER[1] + normal.sample(&mut rng),
                ]
            })
            .collect();
        if extra.iter().all(|x| x[0] + x[1] > anchor_level) {
            let rows = R2_ANCHORS
                .iter()
                .map(|a| a.to_vec())
                .chain(extra)
                .collect();
            let data = Dataset::positive(2, rows)?;
            verify_separable(&data)?;
            return Ok(data);
        }
    }
    Err(Error::Generation(format!(
        "no admissible planar sample in {MAX_RETRIES} draws"
    )))
}

/// The sparse fixture: 15 vectors in R^100, each with a uniformly drawn
/// support of size 1..=10 and entries uniform on (-2, 4).
pub fn gen_r100_sparse(seed: u64) -> Result<Dataset> {
    gen_sparse(seed, R100_DIM, R100_COUNT, R100_MAX_SUPPORT)
}

fn gen_sparse(seed: u64, dim: usize, count: usize, max_support: usize) -> Result<Dataset> {
    if max_support == 0 || max_support > dim {
        return Err(Error::Config(format!(
            "sparsity must lie in 1..={dim}, got {max_support}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..100 {
        let rows: Vec<Vec<f64>> = (0..count)
            .map(|_| {
                let k = rng.gen_range(1..=max_support);
                let mut row = vec![0.0; dim];
                for j in sample(&mut rng, dim, k).into_iter() {
                    row[j] = loop {
                        let v = rng.gen_range(R100_RANGE.0..R100_RANGE.1);
                        if v != R100_RANGE.0 && v != 0.0 {
                            break v;
                        }
                    };
                }
                row
            })
            .collect();
        let data = Dataset::positive(dim, rows)?;
        if verify_separable(&data).is_ok() {
            return Ok(data);
        }
    }
    Err(Error::Generation("sparse sample not separable after 100 draws".into()))
}

/// `{((1, 0), +1), ((0, 1), +1)}`.
pub fn gen_symmetric_pair() -> Dataset {
    Dataset::positive(2, vec![vec![1.0, 0.0], vec![0.0, 1.0]]).expect("fixed fixture")
}

/// `n` Gaussian points labeled by a random unit separator, keeping only
/// points at distance at least `gap` from it.
pub fn gen_random_separable(seed: u64, n: usize, dim: usize, gap: f64) -> Result<Dataset> {
    if n == 0 || dim == 0 {
        return Err(Error::Config("random_separable needs n, dim >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal_vec = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..dim).map(|_| StandardNormal.sample(rng)).collect()
    };
    let mut w_star = normal_vec(&mut rng);
    let norm = dot(&w_star, &w_star).sqrt();
    w_star.iter_mut().for_each(|v| *v /= norm);
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut attempts = 0;
    while rows.len() < n {
        attempts += 1;
        if attempts > MAX_RETRIES * n {
            return Err(Error::Generation("gap too large for random_separable".into()));
        }
        let x = normal_vec(&mut rng);
        let s = dot(&x, &w_star);
        if s.abs() >= gap {
            labels.push(s.signum());
            rows.push(x);
        }
    }
    let data = Dataset::new(dim, rows, labels)?;
    verify_separable(&data)?;
    Ok(data)
}

/// ChaCha stream reserved for initial iterates, so a single seed can drive
/// both a fixture and its starting point without reusing random bits.
pub const INIT_STREAM: u64 = 1;

/// `w0 ~ N(0, std^2 I)` drawn from the init stream of `seed`.
pub fn gaussian_weights(dim: usize, std: f64, seed: u64) -> WeightVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(INIT_STREAM);
    let coords = (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            std * z
        })
        .collect::<Vec<f64>>();
    WeightVector::new(coords).expect("gaussian draws are finite")
}
