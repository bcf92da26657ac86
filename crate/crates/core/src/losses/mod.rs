//! Training objectives. Every loss returns its value together with the
//! analytic gradient for each differentiable input, keyed by input name.

mod embedding;
mod logits;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

pub use embedding::{align_loss, embed_loss, infonce_distill, infonce_explicit, unif_loss};
pub use logits::{ce_loss, kd_loss, srrl_logit_loss, SrrlChain};

/// Gradient keys shared by all losses so [`total_loss`] can merge them.
pub mod keys {
    pub const ZS: &str = "zs";
    pub const ZT: &str = "zt";
    pub const STUDENT_LOGITS: &str = "student_logits";
    pub const STUDENT_FEATURES: &str = "student_features";
    pub const CONNECTOR: &str = "connector";

    pub fn connector_weight(layer: usize) -> String {
        format!("{CONNECTOR}.{layer}.weight")
    }

    pub fn connector_bias(layer: usize) -> String {
        format!("{CONNECTOR}.{layer}.bias")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult<T> {
    pub value: T,
    pub grads: BTreeMap<String, Matrix<T>>,
    /// Named sub-values for reporting (e.g. `align`, `uniform`).
    pub terms: BTreeMap<&'static str, T>,
}

impl<T: Scalar> LossResult<T> {
    pub(crate) fn new(value: T) -> Self {
        Self {
            value,
            grads: BTreeMap::new(),
            terms: BTreeMap::new(),
        }
    }

    pub(crate) fn with_grad(mut self, key: impl Into<String>, g: Matrix<T>) -> Self {
        self.grads.insert(key.into(), g);
        self
    }

    pub fn grad(&self, key: &str) -> Option<&Matrix<T>> {
        self.grads.get(key)
    }

    pub fn term(&self, name: &str) -> Option<T> {
        self.terms.get(name).copied()
    }

    /// `self += w * other`, merging gradients by key.
    pub(crate) fn accumulate(&mut self, w: T, other: &LossResult<T>) -> Result<()> {
        self.value += w * other.value;
        for (k, g) in &other.grads {
            match self.grads.get_mut(k) {
                Some(acc) => acc.axpy(w, g)?,
                None => {
                    self.grads.insert(k.clone(), g.scale(w));
                }
            }
        }
        Ok(())
    }
}

/// Weights and hyperparameters of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_align: f64,
    pub w_uniform: f64,
    pub alpha: f64,
    pub t: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub kd_temperature: f64,
    pub nce_temperature: f64,
    pub uniformity_log_form: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_align: 1.0,
            w_uniform: 1.0,
            alpha: 2.0,
            t: 2.0,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            kd_temperature: 4.0,
            nce_temperature: 0.5,
            uniformity_log_form: true,
        }
    }
}

impl LossWeights {
    /// Range checks; the error names the offending field.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("alpha", self.alpha),
            ("t", self.t),
            ("kd_temperature", self.kd_temperature),
            ("nce_temperature", self.nce_temperature),
        ];
        for (key, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config {
                    key: key.into(),
                    message: format!("must be > 0, got {v}"),
                });
            }
        }
        let non_negative = [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("w_align", self.w_align),
            ("w_uniform", self.w_uniform),
        ];
        for (key, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config {
                    key: key.into(),
                    message: format!("must be >= 0, got {v}"),
                });
            }
        }
        Ok(())
    }
}

/// Per-batch loss terms fed to [`total_loss`]. The logit term is either
/// the temperature KD loss or the SRRL logit loss.
#[derive(Debug, Clone, Default)]
pub struct LossComponents<T> {
    pub ce: Option<LossResult<T>>,
    pub embed: Option<LossResult<T>>,
    pub logit: Option<LossResult<T>>,
}

/// `lambda1 * CE + lambda2 * Embed + lambda3 * logit`.
///
/// A term whose weight is zero is dropped outright (never scaled by zero),
/// so `lambda2 = lambda3 = 0` reproduces the plain cross-entropy result
/// bit for bit and the logit term may be absent.
pub fn total_loss<T: Scalar>(
    components: &LossComponents<T>,
    weights: &LossWeights,
) -> Result<LossResult<T>> {
    let parts = [
        ("ce", "lambda1", weights.lambda1, components.ce.as_ref()),
        ("embed", "lambda2", weights.lambda2, components.embed.as_ref()),
        ("logit", "lambda3", weights.lambda3, components.logit.as_ref()),
    ];
    let mut out: Option<LossResult<T>> = None;
    for (component, weight_name, w, part) in parts {
        if w == 0.0 {
            continue;
        }
        let part = part.ok_or(Error::MissingComponent {
            component,
            weight: weight_name,
        })?;
        let w = T::of(w);
        match out.as_mut() {
            None => {
                let mut first = LossResult::new(w * part.value);
                first.grads = part
                    .grads
                    .iter()
                    .map(|(k, g)| (k.clone(), if w == T::one() { g.clone() } else { g.scale(w) }))
                    .collect();
                out = Some(first);
            }
            Some(acc) => acc.accumulate(w, part)?,
        }
        let acc = out.as_mut().expect("initialized above");
        acc.terms.insert(component, part.value);
        for (name, v) in &part.terms {
            acc.terms.insert(name, *v);
        }
    }
    Ok(out.unwrap_or_else(|| LossResult::new(T::zero())))
}

/// Shared validation for paired embedding batches.
pub(crate) fn check_pair<T: Scalar>(
    op: &'static str,
    zs: &Matrix<T>,
    zt: &Matrix<T>,
    min_batch: usize,
) -> Result<()> {
    if zs.shape() != zt.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: zs.shape(),
            right: zt.shape(),
        });
    }
    check_embeddings(op, zs, min_batch)?;
    check_embeddings(op, zt, min_batch)
}

pub(crate) fn check_embeddings<T: Scalar>(
    op: &'static str,
    z: &Matrix<T>,
    min_batch: usize,
) -> Result<()> {
    if z.cols() == 0 {
        return Err(Error::EmptyInput(op));
    }
    if z.rows() < min_batch {
        return Err(Error::InsufficientBatch {
            op,
            needed: min_batch,
            got: z.rows(),
        });
    }
    let tiny = T::of(crate::numerics::DEFAULT_NORM_EPS);
    for (row, r) in z.iter_rows().enumerate() {
        if crate::numerics::norm(r) <= tiny {
            return Err(Error::ZeroNormRow { op, row });
        }
    }
    if !z.is_finite() {
        return Err(Error::NonFinite(format!("{op}: input")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn unit(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        crate::numerics::l2_normalize_rows(&random(rows, cols, rng), 1e-12).unwrap()
    }

    fn components(rng: &mut ChaCha8Rng) -> (LossComponents<f64>, LossWeights) {
        let w = LossWeights::default();
        let logits = random(6, 4, rng);
        let teacher = random(6, 4, rng);
        let labels = [0, 1, 2, 3, 0, 1];
        let zs = unit(6, 5, rng);
        let zt = unit(6, 5, rng);
        (
            LossComponents {
                ce: Some(ce_loss(&logits, &labels).unwrap()),
                embed: Some(embed_loss(&zs, &zt, &w).unwrap()),
                logit: Some(kd_loss(&logits, &teacher, w.kd_temperature).unwrap()),
            },
            w,
        )
    }

    #[test]
    fn supervised_only_equals_ce_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (c, mut w) = components(&mut rng);
        w.lambda2 = 0.0;
        w.lambda3 = 0.0;
        let total = total_loss(&c, &w).unwrap();
        let ce = c.ce.as_ref().unwrap();
        assert_eq!(total.value, ce.value);
        assert_eq!(total.grads, ce.grads);
    }

    #[test]
    fn unit_weights_sum_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (c, w) = components(&mut rng);
        let total = total_loss(&c, &w).unwrap();
        let parts = [&c.ce, &c.embed, &c.logit].map(|p| p.as_ref().unwrap());
        let expected: f64 = parts.iter().map(|p| p.value).sum();
        assert!((total.value - expected).abs() <= 1e-12);
        let g = total.grad(keys::STUDENT_LOGITS).unwrap();
        let mut sum = parts[0].grad(keys::STUDENT_LOGITS).unwrap().clone();
        sum.axpy(1.0, parts[2].grad(keys::STUDENT_LOGITS).unwrap()).unwrap();
        assert!(crate::numerics::max_relative_error(g, &sum, 1e-12).0 <= 1e-12);
        assert_eq!(total.grad(keys::ZS), parts[1].grad(keys::ZS));
    }

    #[test]
    fn no_logit_term_when_lambda3_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut c, mut w) = components(&mut rng);
        c.logit = None;
        w.lambda3 = 0.0;
        let total = total_loss(&c, &w).unwrap();
        assert!(total.term("logit").is_none());
        assert!(total.term("align").is_some());
    }

    #[test]
    fn missing_logit_term_with_positive_lambda3_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (mut c, w) = components(&mut rng);
        c.logit = None;
        assert!(matches!(
            total_loss(&c, &w),
            Err(Error::MissingComponent { weight: "lambda3", .. })
        ));
    }

    #[test]
    fn weight_validation_names_field() {
        let w = LossWeights {
            alpha: -1.0,
            ..Default::default()
        };
        match w.validate() {
            Err(Error::Config { key, .. }) => assert_eq!(key, "alpha"),
            other => panic!("unexpected {other:?}"),
        }
        let w = LossWeights {
            lambda2: -0.5,
            ..Default::default()
        };
        assert!(w.validate().is_err());
        assert!(LossWeights::default().validate().is_ok());
    }
}
