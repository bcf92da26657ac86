//! Multilayer perceptrons used for encoders, classification heads,
//! projectors and the SRRL connector, with hand-written backpropagation.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{l2_normalize_rows, l2_normalize_rows_backward, Matrix, DEFAULT_NORM_EPS};
use crate::scalar::Scalar;

pub use checkpoint::{load_params, read_params, save_params, write_params, CHECKPOINT_MAGIC};

pub const DEFAULT_PROJECTION_DIM: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply<T: Scalar>(self, v: T) -> T {
        match self {
            // `max` would swallow NaN
            Activation::Relu if v > T::zero() || v.is_nan() => v,
            Activation::Relu => T::zero(),
            Activation::Identity => v,
        }
    }

    fn derivative<T: Scalar>(self, pre: T) -> T {
        match self {
            Activation::Relu if pre > T::zero() => T::one(),
            Activation::Relu => T::zero(),
            Activation::Identity => T::one(),
        }
    }
}

/// Layer layout of an MLP. The activation sits between layers; the last
/// affine map is followed by it only when `activate_output` is set (used by
/// backbones whose features feed a separate head).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub activate_output: bool,
    pub final_normalize: bool,
}

impl MlpSpec {
    pub fn new(layer_dims: Vec<usize>) -> Result<Self> {
        let spec = Self {
            layer_dims,
            activation: Activation::Relu,
            activate_output: false,
            final_normalize: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_output_activation(mut self) -> Self {
        self.activate_output = true;
        self
    }

    pub fn with_final_normalize(mut self) -> Self {
        self.final_normalize = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "MLP needs at least 2 dims, got {:?}",
                self.layer_dims
            )));
        }
        if self.layer_dims.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "MLP dims must be >= 1, got {:?}",
                self.layer_dims
            )));
        }
        Ok(())
    }

    pub fn in_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated spec")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    /// Multiply-accumulates for one forward pass of one sample.
    pub fn macs_per_sample(&self) -> u64 {
        self.layer_dims
            .windows(2)
            .map(|w| (w[0] * w[1]) as u64)
            .sum()
    }

    fn activation_after(&self, layer: usize) -> Activation {
        if layer + 1 < self.num_layers() || self.activate_output {
            self.activation
        } else {
            Activation::Identity
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectorKind {
    Linear,
    #[default]
    Mlp2,
}

/// Projector onto the unit sphere in `R^out_dim`. `Mlp2` keeps the hidden
/// width equal to the input width.
pub fn make_projector(kind: ProjectorKind, in_dim: usize, out_dim: usize) -> Result<MlpSpec> {
    if out_dim > in_dim {
        log::warn!("projector output dim {out_dim} exceeds input dim {in_dim}");
    }
    let dims = match kind {
        ProjectorKind::Linear => vec![in_dim, out_dim],
        ProjectorKind::Mlp2 => vec![in_dim, in_dim, out_dim],
    };
    Ok(MlpSpec::new(dims)?.with_final_normalize())
}

/// SRRL connector: `in -> round_half_up((in + out) / 2) -> out`.
pub fn make_connector(in_dim: usize, out_dim: usize) -> Result<MlpSpec> {
    let mid = (in_dim + out_dim).div_ceil(2);
    MlpSpec::new(vec![in_dim, mid, out_dim])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    /// `out x in`
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Layer<T> {
    fn zeros_like(&self) -> Self {
        Self {
            weight: Matrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: vec![T::zero(); self.bias.len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub layers: Vec<Layer<T>>,
    pub seed: u64,
}

/// Gradients have the same layout as the parameters.
pub type ParamGrads<T> = ModelParams<T>;

impl<T: Scalar> ModelParams<T> {
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(Layer::zeros_like).collect(),
            seed: self.seed,
        }
    }

    pub fn check_spec(&self, spec: &MlpSpec) -> Result<()> {
        spec.validate()?;
        let ok = self.layers.len() == spec.num_layers()
            && self.layers.iter().enumerate().all(|(l, layer)| {
                layer.weight.shape() == (spec.layer_dims[l + 1], spec.layer_dims[l])
                    && layer.bias.len() == spec.layer_dims[l + 1]
            });
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "parameters do not match spec {:?}",
                spec.layer_dims
            )))
        }
    }

    /// Flat views of every tensor, weights then bias per layer.
    pub fn tensors(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Bit-level equality (distinguishes `-0.0` and NaN payloads).
    pub fn bit_identical(&self, other: &Self) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len()
            && a.iter().zip(&b).all(|(x, y)| {
                x.len() == y.len()
                    && x.iter()
                        .zip(y.iter())
                        .all(|(p, q)| p.as_f64().to_bits() == q.as_f64().to_bits())
            })
    }
}

/// Uniform `+-sqrt(6 / fan_in)` weights and zero biases. Layer `l` draws
/// from ChaCha8 seeded with `seed` on stream `l`, so `(spec, seed)` fixes
/// the parameters bit for bit.
pub fn init_params<T: Scalar>(spec: &MlpSpec, seed: u64) -> Result<ModelParams<T>> {
    spec.validate()?;
    let layers = spec
        .layer_dims
        .windows(2)
        .enumerate()
        .map(|(l, w)| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(l as u64);
            let bound = (6.0 / fan_in as f64).sqrt();
            let weight =
                Matrix::from_fn(fan_out, fan_in, |_, _| T::of(rng.random_range(-bound..=bound)));
            Layer {
                weight,
                bias: vec![T::zero(); fan_out],
            }
        })
        .collect();
    Ok(ModelParams { layers, seed })
}

/// Intermediate values kept by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    /// Input to each layer.
    inputs: Vec<Matrix<T>>,
    /// Pre-activation output of each layer.
    pre: Vec<Matrix<T>>,
    /// Output before the final normalization, when there is one.
    pre_norm: Option<Matrix<T>>,
}

pub fn forward<T: Scalar>(
    params: &ModelParams<T>,
    spec: &MlpSpec,
    x: &Matrix<T>,
) -> Result<(Matrix<T>, ForwardCache<T>)> {
    params.check_spec(spec)?;
    if x.cols() != spec.in_dim() {
        return Err(Error::ShapeMismatch {
            op: "forward",
            left: x.shape(),
            right: (x.rows(), spec.in_dim()),
        });
    }
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut pre = Vec::with_capacity(params.layers.len());
    let mut h = x.clone();
    for (l, layer) in params.layers.iter().enumerate() {
        let mut z = h.matmul_t(&layer.weight)?;
        for i in 0..z.rows() {
            for (v, &b) in z.row_mut(i).iter_mut().zip(&layer.bias) {
                *v += b;
            }
        }
        let act = spec.activation_after(l);
        let out = z.map(|v| act.apply(v));
        inputs.push(std::mem::replace(&mut h, out));
        pre.push(z);
    }
    let (out, pre_norm) = if spec.final_normalize {
        let n = l2_normalize_rows(&h, T::of(DEFAULT_NORM_EPS))?;
        (n, Some(h))
    } else {
        (h, None)
    };
    Ok((
        out,
        ForwardCache {
            inputs,
            pre,
            pre_norm,
        },
    ))
}

/// Output only; no cache is kept.
pub fn predict<T: Scalar>(params: &ModelParams<T>, spec: &MlpSpec, x: &Matrix<T>) -> Result<Matrix<T>> {
    forward(params, spec, x).map(|(out, _)| out)
}

/// Backpropagates `grad_out` (w.r.t. the forward output) and returns the
/// parameter gradients and the gradient w.r.t. the input.
pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    spec: &MlpSpec,
    cache: &ForwardCache<T>,
    grad_out: &Matrix<T>,
) -> Result<(ParamGrads<T>, Matrix<T>)> {
    let mut delta = match &cache.pre_norm {
        Some(pre_norm) => l2_normalize_rows_backward(pre_norm, grad_out, T::of(DEFAULT_NORM_EPS))?,
        None => grad_out.clone(),
    };
    let mut grads = params.zeros_like();
    for l in (0..params.layers.len()).rev() {
        let act = spec.activation_after(l);
        let pre = &cache.pre[l];
        if pre.shape() != delta.shape() {
            return Err(Error::ShapeMismatch {
                op: "backward",
                left: pre.shape(),
                right: delta.shape(),
            });
        }
        if act != Activation::Identity {
            for (d, &p) in delta.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                *d *= act.derivative(p);
            }
        }
        let g = &mut grads.layers[l];
        g.weight = delta.t_matmul(&cache.inputs[l])?;
        for row in delta.iter_rows() {
            for (b, &d) in g.bias.iter_mut().zip(row) {
                *b += d;
            }
        }
        delta = delta.matmul(&params.layers[l].weight)?;
    }
    Ok((grads, delta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_relative_error};

    fn random_input(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.5..1.5))
    }

    #[test]
    fn init_is_deterministic_and_seed_dependent() {
        let spec = MlpSpec::new(vec![4, 6, 3]).unwrap();
        let a = init_params::<f64>(&spec, 9).unwrap();
        let b = init_params::<f64>(&spec, 9).unwrap();
        let c = init_params::<f64>(&spec, 10).unwrap();
        assert!(a.bit_identical(&b));
        assert!(!a.bit_identical(&c));
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let spec = MlpSpec::new(vec![4, 3]).unwrap();
        let p = init_params::<f64>(&spec, 9).unwrap();
        let bound = (6.0f64 / 4.0).sqrt();
        assert!((bound - 1.2247).abs() < 1e-4);
        assert!(p.layers[0].weight.as_slice().iter().all(|w| w.abs() <= bound));
        assert!(p.layers[0].bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let spec = MlpSpec::new(vec![3, 3]).unwrap();
        let params = ModelParams {
            layers: vec![Layer {
                weight: Matrix::identity(3),
                bias: vec![0.0; 3],
            }],
            seed: 0,
        };
        let x = random_input(4, 3, 1);
        assert_eq!(predict(&params, &spec, &x).unwrap(), x);
    }

    #[test]
    fn final_normalize_gives_unit_rows() {
        let spec = make_projector(ProjectorKind::Mlp2, 6, 4).unwrap();
        let p = init_params::<f64>(&spec, 3).unwrap();
        let out = predict(&p, &spec, &random_input(5, 6, 2)).unwrap();
        for n in out.row_norms() {
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let spec = MlpSpec::new(vec![3, 2]).unwrap();
        let p = init_params::<f64>(&spec, 1).unwrap();
        assert!(matches!(
            forward(&p, &spec, &random_input(2, 4, 1)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    fn weighted_output(
        params: &ModelParams<f64>,
        spec: &MlpSpec,
        x: &Matrix<f64>,
        w: &Matrix<f64>,
    ) -> f64 {
        let out = predict(params, spec, x).unwrap();
        crate::numerics::dot(out.as_slice(), w.as_slice())
    }

    fn check_backprop(spec: &MlpSpec, seed: u64) {
        let params = init_params::<f64>(spec, seed).unwrap();
        let x = random_input(5, spec.in_dim(), seed + 100);
        let w = random_input(5, spec.out_dim(), seed + 200);
        let (_, cache) = forward(&params, spec, &x).unwrap();
        let (grads, gx) = backward(&params, spec, &cache, &w).unwrap();

        let fd_x = finite_diff_grad(|m| weighted_output(&params, spec, m, &w), &x, 1e-5).unwrap();
        assert!(max_relative_error(&gx, &fd_x, 1e-4).0 <= 1e-5);

        for l in 0..params.layers.len() {
            let fd_w = finite_diff_grad(
                |m| {
                    let mut p = params.clone();
                    p.layers[l].weight = m.clone();
                    weighted_output(&p, spec, &x, &w)
                },
                &params.layers[l].weight,
                1e-5,
            )
            .unwrap();
            assert!(max_relative_error(&grads.layers[l].weight, &fd_w, 1e-4).0 <= 1e-5);

            let bias = Matrix::new(1, params.layers[l].bias.len(), params.layers[l].bias.clone()).unwrap();
            let fd_b = finite_diff_grad(
                |m| {
                    let mut p = params.clone();
                    p.layers[l].bias = m.as_slice().to_vec();
                    weighted_output(&p, spec, &x, &w)
                },
                &bias,
                1e-5,
            )
            .unwrap();
            let gb = Matrix::new(1, grads.layers[l].bias.len(), grads.layers[l].bias.clone()).unwrap();
            assert!(max_relative_error(&gb, &fd_b, 1e-4).0 <= 1e-5);
        }
    }

    #[test]
    fn backprop_matches_finite_differences() {
        check_backprop(&MlpSpec::new(vec![4, 7, 3]).unwrap(), 1);
        check_backprop(&MlpSpec::new(vec![5, 6, 6, 2]).unwrap().with_output_activation(), 2);
        check_backprop(&make_projector(ProjectorKind::Mlp2, 6, 3).unwrap(), 3);
        check_backprop(&make_projector(ProjectorKind::Linear, 6, 3).unwrap(), 4);
        check_backprop(&make_connector(3, 8).unwrap(), 5);
    }

    #[test]
    fn forward_is_deterministic() {
        let spec = MlpSpec::new(vec![4, 8, 2]).unwrap();
        let p = init_params::<f64>(&spec, 7).unwrap();
        let x = random_input(3, 4, 8);
        let a = predict(&p, &spec, &x).unwrap();
        let b = predict(&p, &spec, &x).unwrap();
        assert!(a.as_slice().iter().zip(b.as_slice()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn projector_layouts() {
        let p = make_projector(ProjectorKind::Mlp2, 512, 128).unwrap();
        assert_eq!(p.layer_dims, vec![512, 512, 128]);
        assert!(p.final_normalize);
        let p = make_projector(ProjectorKind::Linear, 512, 128).unwrap();
        assert_eq!(p.layer_dims, vec![512, 128]);
        assert!(p.final_normalize);
    }

    #[test]
    fn connector_mid_dim_rounds_half_up() {
        assert_eq!(make_connector(32, 64).unwrap().layer_dims, vec![32, 48, 64]);
        assert_eq!(make_connector(64, 64).unwrap().layer_dims, vec![64, 64, 64]);
        assert_eq!(make_connector(33, 64).unwrap().layer_dims, vec![33, 49, 64]);
        assert!(!make_connector(33, 64).unwrap().final_normalize);
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(vec![3]).is_err());
        assert!(MlpSpec::new(vec![3, 0]).is_err());
    }
}
