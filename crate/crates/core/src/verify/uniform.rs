//! Free points on the circle descending the uniformity loss alone should
//! spread into a regular polygon.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::{keys, unif_loss};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy)]
pub struct UniformityOptions {
    pub t: f64,
    pub log_form: bool,
    pub step_size: f64,
    pub max_steps: usize,
    /// Stop once the angular gradient norm falls below this.
    pub grad_tol: f64,
    pub seed: u64,
}

impl Default for UniformityOptions {
    fn default() -> Self {
        Self {
            t: 2.0,
            log_form: true,
            step_size: 0.05,
            max_steps: 20_000,
            grad_tol: 1e-10,
            seed: 9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniformityResult {
    pub points: Matrix<f64>,
    pub loss: f64,
    /// Angular gaps between neighbours, sorted by angle, wrap-around last.
    pub gaps: Vec<f64>,
    /// `max |gap - 2 pi / B| / (2 pi / B)`.
    pub max_gap_rel_err: f64,
    pub steps: usize,
    pub converged: bool,
}

/// Gradient descent on the angles `theta_i` of `z_i = (cos, sin)`, so the
/// iterates stay exactly on the circle. The loss and its gradient in `z`
/// come from `unif_loss`; the chain rule to angles and the geometry check
/// are done here.
pub fn uniformity_optimize_oracle(b: usize, opts: &UniformityOptions) -> Result<UniformityResult> {
    if b < 2 {
        return Err(Error::InsufficientBatch {
            op: "uniformity_optimize_oracle",
            needed: 2,
            got: b,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut theta: Vec<f64> = (0..b).map(|_| rng.random_range(0.0..TAU)).collect();
    let points = |theta: &[f64]| Matrix::from_fn(b, 2, |i, k| if k == 0 { theta[i].cos() } else { theta[i].sin() });

    let mut steps = 0;
    let mut converged = false;
    while steps < opts.max_steps {
        let r = unif_loss(&points(&theta), opts.t, opts.log_form)?;
        let g = &r.grads[keys::ZS];
        let dtheta: Vec<f64> = (0..b)
            .map(|i| -g.get(i, 0) * theta[i].sin() + g.get(i, 1) * theta[i].cos())
            .collect();
        let norm = dtheta.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Divergence(format!("angular gradient {norm} at step {steps}")));
        }
        if norm < opts.grad_tol {
            converged = true;
            break;
        }
        for (th, d) in theta.iter_mut().zip(&dtheta) {
            *th -= opts.step_size * d;
        }
        steps += 1;
    }

    let z = points(&theta);
    let loss = unif_loss(&z, opts.t, opts.log_form)?.value;
    let mut sorted: Vec<f64> = theta.iter().map(|t| t.rem_euclid(TAU)).collect();
    sorted.sort_by(f64::total_cmp);
    let mut gaps: Vec<f64> = sorted.windows(2).map(|w| w[1] - w[0]).collect();
    gaps.push(sorted[0] + TAU - sorted[b - 1]);
    let ideal = TAU / b as f64;
    let max_gap_rel_err = gaps.iter().map(|g| (g - ideal).abs() / ideal).fold(0.0, f64::max);
    Ok(UniformityResult {
        points: z,
        loss,
        gaps,
        max_gap_rel_err,
        steps,
        converged,
    })
}
