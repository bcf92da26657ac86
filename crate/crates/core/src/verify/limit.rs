//! Large-negative-count behaviour of InfoNCE: `L(M) - log M` settles to a
//! constant as the number of explicit negatives `M` grows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::losses::infonce_explicit;
use crate::numerics::{l2_normalize_rows, Matrix};

/// Source of positive pairs `(zs_i, zt_i)` on the unit sphere.
pub trait EmbeddingSampler {
    fn dim(&self) -> usize;
    fn sample_pairs(&self, n: usize, rng: &mut ChaCha8Rng) -> (Matrix<f64>, Matrix<f64>);
}

/// `zs = normalize(u)`, `zt = normalize(u + noise * v)` with `u, v ~ N(0, I)`.
#[derive(Debug, Clone, Copy)]
pub struct CorrelatedSphere {
    pub dim: usize,
    pub noise: f64,
}

impl EmbeddingSampler for CorrelatedSphere {
    fn dim(&self) -> usize {
        self.dim
    }

    fn sample_pairs(&self, n: usize, rng: &mut ChaCha8Rng) -> (Matrix<f64>, Matrix<f64>) {
        let u = Matrix::from_fn(n, self.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let v = Matrix::from_fn(n, self.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut t = u.clone();
        t.axpy(self.noise, &v).expect("same shape");
        (
            l2_normalize_rows(&u, 1e-12).expect("non-empty"),
            l2_normalize_rows(&t, 1e-12).expect("non-empty"),
        )
    }
}

/// Every embedding is the same unit vector.
#[derive(Debug, Clone, Copy)]
pub struct Degenerate {
    pub dim: usize,
}

impl EmbeddingSampler for Degenerate {
    fn dim(&self) -> usize {
        self.dim
    }

    fn sample_pairs(&self, n: usize, _rng: &mut ChaCha8Rng) -> (Matrix<f64>, Matrix<f64>) {
        let z = Matrix::from_fn(n, self.dim, |_, k| if k == 0 { 1.0 } else { 0.0 });
        (z.clone(), z)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LimitSweepResult {
    pub tau: f64,
    /// `(M, L(M) - log M)`, `M` increasing.
    pub points: Vec<(usize, f64)>,
    pub oracle_m: usize,
    pub oracle: f64,
    /// `|points[i].1 - oracle|`.
    pub deviations: Vec<f64>,
    /// Deviation at the largest swept `M`.
    pub final_deviation: f64,
    /// Largest increase between successive deviations (0 if monotone).
    pub max_increase: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct SweepOptions {
    pub anchors: usize,
    pub seed: u64,
    pub include_positive: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            anchors: 128,
            seed: 9,
            include_positive: true,
        }
    }
}

/// Evaluates InfoNCE with `M` explicit negatives for every `M` in
/// `m_list`, plus `oracle_m`. The negative pools are nested: `L(M)` uses
/// the first `M` rows of one pool of size `oracle_m`, so differences
/// between `M` values are not masked by resampling noise.
pub fn infonce_limit_sweep(
    sampler: &impl EmbeddingSampler,
    taus: &[f64],
    m_list: &[usize],
    oracle_m: usize,
    opts: &SweepOptions,
) -> Result<Vec<LimitSweepResult>> {
    if m_list.is_empty() || opts.anchors == 0 {
        return Err(Error::EmptyInput("infonce_limit_sweep"));
    }
    if !m_list.iter().all(|m| m.is_power_of_two()) || m_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!(
            "M list must be increasing powers of two, got {m_list:?}"
        )));
    }
    let max_m = *m_list.last().expect("non-empty");
    if oracle_m <= max_m {
        return Err(Error::InvalidArgument(format!(
            "oracle M {oracle_m} must exceed the largest swept M {max_m}"
        )));
    }
    if let Some(&tau) = taus.iter().find(|&&t| !(t > 0.0 && t.is_finite())) {
        return Err(Error::InvalidArgument(format!("tau must be > 0, got {tau}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (zs, zt) = sampler.sample_pairs(opts.anchors, &mut rng);
    let (neg_s, neg_t) = sampler.sample_pairs(oracle_m, &mut rng);
    let prefix = |m: usize| -> Vec<usize> { (0..m).collect() };

    let mut out = Vec::with_capacity(taus.len());
    for &tau in taus {
        let eval = |m: usize| -> Result<f64> {
            let idx = prefix(m);
            let l = infonce_explicit(
                &zs,
                &zt,
                &neg_s.select_rows(&idx),
                &neg_t.select_rows(&idx),
                tau,
                opts.include_positive,
            )?;
            Ok(l - (m as f64).ln())
        };
        let points = m_list
            .iter()
            .map(|&m| eval(m).map(|v| (m, v)))
            .collect::<Result<Vec<_>>>()?;
        let oracle = eval(oracle_m)?;
        let deviations: Vec<f64> = points.iter().map(|&(_, v)| (v - oracle).abs()).collect();
        let max_increase = deviations
            .windows(2)
            .map(|w| (w[1] - w[0]).max(0.0))
            .fold(0.0, f64::max);
        out.push(LimitSweepResult {
            tau,
            final_deviation: *deviations.last().expect("non-empty"),
            points,
            oracle_m,
            oracle,
            deviations,
            max_increase,
        });
    }
    Ok(out)
}
