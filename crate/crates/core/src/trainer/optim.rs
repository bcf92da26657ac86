use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ModelParams, ParamGrads};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("optimizer.lr", self.lr > 0.0 && self.lr.is_finite()),
            ("optimizer.beta1", (0.0..1.0).contains(&self.beta1)),
            ("optimizer.beta2", (0.0..1.0).contains(&self.beta2)),
            ("optimizer.eps", self.eps > 0.0 && self.eps.is_finite()),
            (
                "optimizer.weight_decay",
                self.weight_decay >= 0.0 && self.weight_decay.is_finite(),
            ),
        ];
        for (key, ok) in checks {
            if !ok {
                return Err(Error::Config {
                    key: key.into(),
                    message: "out of range".into(),
                });
            }
        }
        Ok(())
    }
}

/// Moment accumulators for one group of parameter tensors.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }
}

/// One AdamW update with decoupled weight decay:
/// `p <- p * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)`.
///
/// Moments are allocated on the first call; later calls must pass tensors
/// of the same shapes. A non-finite gradient aborts before anything is
/// modified.
pub fn adamw_step(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut OptimizerState) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::InvalidArgument(format!(
            "{} parameter tensors but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (t, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() {
            return Err(Error::InvalidArgument(format!(
                "tensor {t}: {} parameters but {} gradients",
                p.len(),
                g.len()
            )));
        }
        if let Some(k) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!(
                "non-finite gradient {} at tensor {t} index {k}",
                g[k]
            )));
        }
    }
    if state.first.is_empty() {
        state.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        state.second = state.first.clone();
    } else if state.first.len() != grads.len()
        || state.first.iter().zip(grads).any(|(m, g)| m.len() != g.len())
    {
        return Err(Error::InvalidArgument(
            "parameter layout changed between optimizer steps".into(),
        ));
    }

    let c = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - c.beta1.powi(t);
    let bias2 = 1.0 - c.beta2.powi(t);
    let decay = 1.0 - c.lr * c.weight_decay;
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.first)
        .zip(&mut state.second)
    {
        for k in 0..p.len() {
            m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
            v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
            let m_hat = m[k] / bias1;
            let v_hat = v[k] / bias2;
            p[k] = p[k] * decay - c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
    }
    Ok(())
}

/// [`adamw_step`] over every tensor of a model.
pub fn step_model(params: &mut ModelParams<f64>, grads: &ParamGrads<f64>, state: &mut OptimizerState) -> Result<()> {
    let g = grads.tensors();
    let mut p = params.tensors_mut();
    adamw_step(&mut p, &g, state)
}

/// Steps several models as one parameter group, in the given order.
pub fn step_models(
    models: &mut [&mut ModelParams<f64>],
    grads: &[&ParamGrads<f64>],
    state: &mut OptimizerState,
) -> Result<()> {
    let g: Vec<&[f64]> = grads.iter().flat_map(|g| g.tensors()).collect();
    let mut p: Vec<&mut [f64]> = models.iter_mut().flat_map(|m| m.tensors_mut()).collect();
    adamw_step(&mut p, &g, state)
}
