//! Analytic gradients of every loss against central finite differences.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::mix_seed;
use crate::error::Result;
use crate::losses::{
    align_loss, ce_loss, embed_loss, infonce_distill, kd_loss, keys, srrl_logit_loss, total_loss, unif_loss,
    LossComponents, LossResult, LossWeights, SrrlChain,
};
use crate::models::{init_params, make_connector, Layer, MlpSpec, ModelParams};
use crate::numerics::{l2_normalize_rows, Matrix, DEFAULT_FD_STEP};

pub const GRAD_OPS: [&str; 9] = [
    "align",
    "unif_log",
    "unif_linear",
    "embed",
    "infonce_distill",
    "kd",
    "ce",
    "srrl",
    "total",
];

const BATCHES: [usize; 3] = [2, 8, 32];
const DIMS: [usize; 3] = [2, 16, 128];

#[derive(Debug, Clone, Copy)]
pub struct GradSuiteOptions {
    pub tolerance: f64,
    /// Relative-error denominator floor, multiplied by `max(1, |loss|)`:
    /// central-difference roundoff grows with the loss value, not with
    /// the gradient.
    pub floor: f64,
    pub step: f64,
    /// Seeds per (B, d) pair.
    pub repeats: usize,
    /// Tensors larger than this are checked on a seeded coordinate sample.
    pub max_coords: usize,
    /// Scales the analytic gradient of the named op by `1 + 1e-3`.
    pub corrupt: Option<&'static str>,
}

impl Default for GradSuiteOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-5,
            floor: 1e-4,
            step: DEFAULT_FD_STEP,
            repeats: 3,
            max_coords: 384,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradFailure {
    pub config: String,
    pub tensor: String,
    pub coord: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpReport {
    pub op: &'static str,
    pub configs: usize,
    pub worst_rel_err: f64,
    /// Worst coordinate of every failing configuration.
    pub failures: Vec<GradFailure>,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct GradSuiteReport {
    pub ops: Vec<OpReport>,
    pub seconds: f64,
}

impl GradSuiteReport {
    pub fn all_passed(&self) -> bool {
        self.ops.iter().all(OpReport::passed)
    }

    pub fn failed_ops(&self) -> Vec<&'static str> {
        self.ops.iter().filter(|r| !r.passed()).map(|r| r.op).collect()
    }
}

pub fn gradient_suite() -> Result<GradSuiteReport> {
    gradient_suite_with(&GradSuiteOptions::default())
}

pub fn gradient_suite_with(opts: &GradSuiteOptions) -> Result<GradSuiteReport> {
    let start = Instant::now();
    let mut ops = Vec::with_capacity(GRAD_OPS.len());
    for (o, &op) in GRAD_OPS.iter().enumerate() {
        let mut report = OpReport {
            op,
            configs: 0,
            worst_rel_err: 0.0,
            failures: Vec::new(),
        };
        for r in 0..opts.repeats {
            for &b in &BATCHES {
                for &d in &DIMS {
                    let seed = mix_seed(&[o as u64, b as u64, d as u64, r as u64]);
                    let case = build_case(op, b, d, seed)?;
                    let worst = check_case(&case, opts, opts.corrupt == Some(op), seed)?;
                    report.configs += 1;
                    if let Some(w) = worst {
                        report.worst_rel_err = report.worst_rel_err.max(w.rel_err);
                        if w.rel_err > opts.tolerance {
                            report.failures.push(w);
                        }
                    }
                }
            }
        }
        ops.push(report);
    }
    Ok(GradSuiteReport {
        ops,
        seconds: start.elapsed().as_secs_f64(),
    })
}

type Inputs = BTreeMap<String, Matrix<f64>>;
type Eval = Box<dyn Fn(&Inputs) -> Result<LossResult<f64>>>;

struct Case {
    label: String,
    inputs: Inputs,
    eval: Eval,
}

fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

fn unit(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    l2_normalize_rows(&gaussian(rows, cols, 1.0, rng), 1e-12).expect("non-empty")
}

fn labels(b: usize, c: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..b).map(|_| rng.random_range(0..c)).collect()
}

fn build_case(op: &'static str, b: usize, d: usize, seed: u64) -> Result<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let odd = seed & 1 == 1;
    let mut inputs = Inputs::new();
    let label;
    let eval: Eval = match op {
        "align" => {
            let alpha = if odd { 1.5 } else { 2.0 };
            inputs.insert(keys::ZS.into(), unit(b, d, &mut rng));
            inputs.insert(keys::ZT.into(), unit(b, d, &mut rng));
            label = format!("B={b} d={d} alpha={alpha}");
            Box::new(move |m| align_loss(&m[keys::ZS], &m[keys::ZT], alpha))
        }
        "unif_log" | "unif_linear" => {
            let log_form = op == "unif_log";
            let t = if odd { 1.0 } else { 2.0 };
            inputs.insert(keys::ZS.into(), unit(b, d, &mut rng));
            label = format!("B={b} d={d} t={t}");
            Box::new(move |m| unif_loss(&m[keys::ZS], t, log_form))
        }
        "embed" => {
            let w = LossWeights {
                w_align: rng.random_range(0.5..1.5),
                w_uniform: rng.random_range(0.5..1.5),
                uniformity_log_form: odd,
                ..LossWeights::default()
            };
            inputs.insert(keys::ZS.into(), unit(b, d, &mut rng));
            inputs.insert(keys::ZT.into(), unit(b, d, &mut rng));
            label = format!("B={b} d={d} log_form={odd}");
            Box::new(move |m| embed_loss(&m[keys::ZS], &m[keys::ZT], &w))
        }
        "infonce_distill" => {
            let tau = if odd { 0.1 } else { 0.5 };
            let include = seed & 2 == 0;
            inputs.insert(keys::ZS.into(), unit(b, d, &mut rng));
            inputs.insert(keys::ZT.into(), unit(b, d, &mut rng));
            label = format!("B={b} d={d} tau={tau} include_positive={include}");
            Box::new(move |m| infonce_distill(&m[keys::ZS], &m[keys::ZT], tau, include))
        }
        "kd" => {
            // d plays the number of classes
            let tau = if odd { 1.0 } else { 4.0 };
            let teacher = gaussian(b, d, 2.0, &mut rng);
            inputs.insert(keys::STUDENT_LOGITS.into(), gaussian(b, d, 2.0, &mut rng));
            label = format!("B={b} C={d} tau={tau}");
            Box::new(move |m| kd_loss(&m[keys::STUDENT_LOGITS], &teacher, tau))
        }
        "ce" => {
            let y = labels(b, d, &mut rng);
            inputs.insert(keys::STUDENT_LOGITS.into(), gaussian(b, d, 2.0, &mut rng));
            label = format!("B={b} C={d}");
            Box::new(move |m| ce_loss(&m[keys::STUDENT_LOGITS], &y))
        }
        "srrl" => {
            let dt = (d / 2).max(2);
            let c = d.clamp(2, 10);
            let conn_spec = make_connector(d, dt)?;
            let cls_spec = MlpSpec::new(vec![dt, c])?;
            let cls: ModelParams<f64> = init_params(&cls_spec, seed ^ 1)?;
            let conn: ModelParams<f64> = init_params(&conn_spec, seed ^ 2)?;
            for (l, layer) in conn.layers.iter().enumerate() {
                inputs.insert(keys::connector_weight(l), layer.weight.clone());
                // a nonzero bias keeps the bias gradient path honest
                let bias = gaussian(1, layer.bias.len(), 0.1, &mut rng);
                inputs.insert(keys::connector_bias(l), bias);
            }
            inputs.insert(keys::STUDENT_FEATURES.into(), gaussian(b, d, 1.0, &mut rng));
            let teacher = gaussian(b, c, 2.0, &mut rng);
            let layers = conn.layers.len();
            label = format!("B={b} d={d} connector={:?} C={c}", conn_spec.layer_dims);
            Box::new(move |m| {
                let params = ModelParams {
                    layers: (0..layers)
                        .map(|l| Layer {
                            weight: m[&keys::connector_weight(l)].clone(),
                            bias: m[&keys::connector_bias(l)].as_slice().to_vec(),
                        })
                        .collect(),
                    seed: 0,
                };
                let chain = SrrlChain {
                    connector_spec: &conn_spec,
                    connector: &params,
                    classifier_spec: &cls_spec,
                    classifier: &cls,
                };
                srrl_logit_loss(&m[keys::STUDENT_FEATURES], chain, &teacher)
            })
        }
        "total" => {
            let c = d.clamp(2, 10);
            let w = LossWeights {
                lambda1: rng.random_range(0.5..1.5),
                lambda2: rng.random_range(0.5..1.5),
                lambda3: rng.random_range(0.5..1.5),
                ..LossWeights::default()
            };
            let y = labels(b, c, &mut rng);
            let teacher = gaussian(b, c, 2.0, &mut rng);
            inputs.insert(keys::ZS.into(), unit(b, d, &mut rng));
            inputs.insert(keys::ZT.into(), unit(b, d, &mut rng));
            inputs.insert(keys::STUDENT_LOGITS.into(), gaussian(b, c, 2.0, &mut rng));
            label = format!("B={b} d={d} C={c}");
            Box::new(move |m| {
                let logits = &m[keys::STUDENT_LOGITS];
                let parts = LossComponents {
                    ce: Some(ce_loss(logits, &y)?),
                    embed: Some(embed_loss(&m[keys::ZS], &m[keys::ZT], &w)?),
                    logit: Some(kd_loss(logits, &teacher, w.kd_temperature)?),
                };
                total_loss(&parts, &w)
            })
        }
        other => unreachable!("unknown op {other}"),
    };
    Ok(Case {
        label: format!("{op} {label}"),
        inputs,
        eval,
    })
}

/// Worst coordinate over every differentiable input of one case.
fn check_case(case: &Case, opts: &GradSuiteOptions, corrupt: bool, seed: u64) -> Result<Option<GradFailure>> {
    let analytic = (case.eval)(&case.inputs)?;
    let floor = opts.floor * analytic.value.abs().max(1.0);
    let mut worst: Option<GradFailure> = None;
    let mut probe = case.inputs.clone();
    for (i, (key, x)) in case.inputs.iter().enumerate() {
        let mut g = analytic
            .grad(key)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(x.rows(), x.cols()));
        if corrupt && i == 0 {
            g = g.scale(1.0 + 1e-3);
        }
        let n = x.as_slice().len();
        let coords: Vec<usize> = if n <= opts.max_coords {
            (0..n).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, i as u64]));
            let mut c = sample(&mut rng, n, opts.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        for k in coords {
            let orig = x.as_slice()[k];
            let m = probe.get_mut(key).expect("same keys");
            m.as_mut_slice()[k] = orig + opts.step;
            let plus = (case.eval)(&probe)?.value;
            let m = probe.get_mut(key).expect("same keys");
            m.as_mut_slice()[k] = orig - opts.step;
            let minus = (case.eval)(&probe)?.value;
            probe.get_mut(key).expect("same keys").as_mut_slice()[k] = orig;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = g.as_slice()[k];
            let rel_err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            let rel_err = if rel_err.is_nan() { f64::INFINITY } else { rel_err };
            if worst.as_ref().is_none_or(|w| rel_err > w.rel_err) {
                worst = Some(GradFailure {
                    config: case.label.clone(),
                    tensor: key.clone(),
                    coord: (k / x.cols(), k % x.cols()),
                    analytic: a,
                    numeric,
                    rel_err,
                });
            }
        }
    }
    Ok(worst)
}
