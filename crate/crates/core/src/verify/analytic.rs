//! Closed-form loss values at hand-picked inputs.

use crate::error::Result;
use crate::losses::{align_loss, ce_loss, kd_loss, unif_loss};
use crate::numerics::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticCheck {
    pub name: &'static str,
    pub got: f64,
    pub want: f64,
}

impl AnalyticCheck {
    pub fn error(&self) -> f64 {
        (self.got - self.want).abs()
    }
}

pub fn analytic_checks() -> Result<Vec<AnalyticCheck>> {
    let ln2 = std::f64::consts::LN_2;
    let p = Matrix::from_rows(&[[0.6, 0.8]])?;
    let q = Matrix::from_rows(&[[-0.6, -0.8]])?;
    let pair = Matrix::from_rows(&[[0.6, 0.8], [-0.6, -0.8]])?;
    let twins = Matrix::from_rows(&[[0.6, 0.8], [0.6, 0.8]])?;
    let z2 = Matrix::zeros(1, 2);
    let z4 = Matrix::zeros(1, 4);
    let check = |name, got: f64, want| AnalyticCheck { name, got, want };
    Ok(vec![
        check("align identical", align_loss(&p, &p, 2.0)?.value, 0.0),
        check("align antipodal alpha=2", align_loss(&p, &q, 2.0)?.value, 4.0),
        check("unif log identical", unif_loss(&twins, 2.0, true)?.value, 0.0),
        check("unif log antipodal t=2", unif_loss(&pair, 2.0, true)?.value, -8.0),
        check("kd zero logits C=2 tau=1", kd_loss(&z2, &z2, 1.0)?.value, ln2),
        check("kd zero logits C=2 tau=2", kd_loss(&z2, &z2, 2.0)?.value, 4.0 * ln2),
        check("ce zero logits C=4", ce_loss(&z4, &[0])?.value, 4f64.ln()),
    ])
}
