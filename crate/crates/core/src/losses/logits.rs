use super::{keys, LossResult};
use crate::error::{Error, Result};
use crate::models::{backward, forward, MlpSpec, ModelParams};
use crate::numerics::{log_softmax_rows, softmax_rows, Matrix};
use crate::scalar::Scalar;

fn check_logits<T: Scalar>(op: &'static str, a: &Matrix<T>, b: &Matrix<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    if a.is_empty() {
        return Err(Error::EmptyInput(op));
    }
    Ok(())
}

/// Temperature-softened distillation loss,
/// `tau^2 * H(softmax(teacher / tau), softmax(student / tau))`, averaged
/// over the batch. The teacher side is a constant.
pub fn kd_loss<T: Scalar>(
    student_logits: &Matrix<T>,
    teacher_logits: &Matrix<T>,
    kd_temperature: T,
) -> Result<LossResult<T>> {
    check_logits("kd_loss", student_logits, teacher_logits)?;
    if !(kd_temperature > T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "kd_temperature must be > 0, got {kd_temperature}"
        )));
    }
    let tau = kd_temperature;
    let inv_tau = T::one() / tau;
    let p = softmax_rows(&teacher_logits.scale(inv_tau));
    let log_q = log_softmax_rows(&student_logits.scale(inv_tau));
    let (b, c) = student_logits.shape();
    let inv_b = T::one() / T::from_count(b);

    let cross: T = p
        .as_slice()
        .iter()
        .zip(log_q.as_slice())
        .map(|(&pi, &lq)| -pi * lq)
        .sum();
    // d/ds of tau^2 * H = tau * (q - p)
    let g = Matrix::from_fn(b, c, |i, j| tau * (log_q.get(i, j).exp() - p.get(i, j)) * inv_b);
    Ok(LossResult::new(tau * tau * cross * inv_b).with_grad(keys::STUDENT_LOGITS, g))
}

/// Mean negative log-likelihood of the true class. The gradient is stored
/// under [`keys::STUDENT_LOGITS`].
pub fn ce_loss<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> Result<LossResult<T>> {
    let (b, c) = logits.shape();
    if b == 0 || c == 0 {
        return Err(Error::EmptyInput("ce_loss"));
    }
    if labels.len() != b {
        return Err(Error::ShapeMismatch {
            op: "ce_loss",
            left: logits.shape(),
            right: (labels.len(), 1),
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: c,
        });
    }
    let log_p = log_softmax_rows(logits);
    let inv_b = T::one() / T::from_count(b);
    let value: T = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -log_p.get(i, y))
        .sum();
    let mut g = log_p.map(|v| v.exp());
    for (i, &y) in labels.iter().enumerate() {
        let v = g.get(i, y) - T::one();
        g.set(i, y, v);
    }
    Ok(LossResult::new(value * inv_b).with_grad(keys::STUDENT_LOGITS, g.scale(inv_b)))
}

/// Trainable connector followed by the frozen teacher classifier.
#[derive(Debug, Clone, Copy)]
pub struct SrrlChain<'a, T> {
    pub connector_spec: &'a MlpSpec,
    pub connector: &'a ModelParams<T>,
    pub classifier_spec: &'a MlpSpec,
    pub classifier: &'a ModelParams<T>,
}

/// Mean squared error between `classifier(connector(student_features))`
/// and the teacher's logits. Gradients flow to the student features and
/// the connector parameters (`connector.{layer}.weight|bias`); the
/// classifier is not updated.
pub fn srrl_logit_loss<T: Scalar>(
    student_features: &Matrix<T>,
    chain: SrrlChain<'_, T>,
    teacher_logits: &Matrix<T>,
) -> Result<LossResult<T>> {
    if chain.connector_spec.out_dim() != chain.classifier_spec.in_dim() {
        return Err(Error::ShapeMismatch {
            op: "srrl_logit_loss (connector -> classifier)",
            left: (0, chain.connector_spec.out_dim()),
            right: (0, chain.classifier_spec.in_dim()),
        });
    }
    let (lifted, conn_cache) = forward(chain.connector, chain.connector_spec, student_features)?;
    let (logits, cls_cache) = forward(chain.classifier, chain.classifier_spec, &lifted)?;
    check_logits("srrl_logit_loss", &logits, teacher_logits)?;

    let diff = logits.sub(teacher_logits)?;
    let n = T::from_count(diff.as_slice().len());
    let value = diff.sum_squares() / n;
    let grad_logits = diff.scale(T::of(2.0) / n);

    let (_, grad_lifted) = backward(chain.classifier, chain.classifier_spec, &cls_cache, &grad_logits)?;
    let (conn_grads, grad_features) =
        backward(chain.connector, chain.connector_spec, &conn_cache, &grad_lifted)?;

    let mut out = LossResult::new(value).with_grad(keys::STUDENT_FEATURES, grad_features);
    for (l, layer) in conn_grads.layers.into_iter().enumerate() {
        let bias = Matrix::new(1, layer.bias.len(), layer.bias).expect("bias row");
        out.grads.insert(keys::connector_weight(l), layer.weight);
        out.grads.insert(keys::connector_bias(l), bias);
    }
    Ok(out)
}
