//! Training regimes: from scratch, linear probe and distillation, all run
//! by one loop so that their batching, augmentation and optimizer order
//! agree step for step.

pub mod ledger;
pub mod metrics;
pub mod optim;

use serde::{Deserialize, Serialize};

use crate::data::{batch_iter, input_augment, mix_seed, AugmentPolicy, Dataset};
use crate::error::{Error, Result};
use crate::losses::{
    ce_loss, embed_loss, infonce_distill, kd_loss, keys, srrl_logit_loss, total_loss, LossComponents, LossWeights,
    SrrlChain,
};
use crate::models::{
    backward, forward, init_params, make_connector, make_projector, predict, ForwardCache, MlpSpec,
    ModelParams, ParamGrads, ProjectorKind, DEFAULT_PROJECTION_DIM,
};
use crate::numerics::Matrix;

pub use ledger::{ledger_report, ClockMode, CostLedger, LedgerReport, Phase, ReportMode, Stopwatch};
pub use metrics::{format_sig9, metrics_csv, EpochMetrics, METRICS_HEADER};
pub use optim::{adamw_step, step_model, step_models, AdamWConfig, OptimizerState};

pub const PHASE_TRAIN: &str = "train";
pub const PHASE_PRETRAIN: &str = "pretrain";
pub const PHASE_PROBE: &str = "probe";

// seed tags under the run seed
const TAG_BACKBONE: u64 = 1;
const TAG_HEAD: u64 = 2;
const TAG_PROJ_S: u64 = 3;
const TAG_PROJ_T: u64 = 4;
const TAG_CONNECTOR: u64 = 5;
const TAG_BATCHES: u64 = 6;
const TAG_AUGMENT: u64 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    pub augment: AugmentPolicy,
    pub clock: ClockMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 250,
            batch_size: 128,
            seed: 9,
            optimizer: AdamWConfig::default(),
            augment: AugmentPolicy::default(),
            clock: ClockMode::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config {
                key: "batch_size".into(),
                message: format!("must be >= 2, got {}", self.batch_size),
            });
        }
        self.optimizer.validate()?;
        self.augment.validate()
    }
}

/// An MLP together with its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: MlpSpec,
    pub params: ModelParams<f64>,
}

impl Network {
    pub fn new(spec: MlpSpec, params: ModelParams<f64>) -> Result<Self> {
        params.check_spec(&spec)?;
        Ok(Self { spec, params })
    }

    pub fn init(spec: MlpSpec, seed: u64) -> Result<Self> {
        let params = init_params(&spec, seed)?;
        Ok(Self { spec, params })
    }

    pub fn forward(&self, x: &Matrix<f64>) -> Result<(Matrix<f64>, ForwardCache<f64>)> {
        forward(&self.params, &self.spec, x)
    }

    pub fn predict(&self, x: &Matrix<f64>) -> Result<Matrix<f64>> {
        predict(&self.params, &self.spec, x)
    }

    pub fn backward(&self, cache: &ForwardCache<f64>, grad_out: &Matrix<f64>) -> Result<(ParamGrads<f64>, Matrix<f64>)> {
        backward(&self.params, &self.spec, cache, grad_out)
    }

    pub fn macs_per_sample(&self) -> u64 {
        self.spec.macs_per_sample()
    }
}

/// Backbone and head layouts of a classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentSpec {
    pub backbone: MlpSpec,
    pub head: MlpSpec,
}

impl StudentSpec {
    pub fn new(backbone: MlpSpec, head: MlpSpec) -> Result<Self> {
        if backbone.out_dim() != head.in_dim() {
            return Err(Error::ShapeMismatch {
                op: "StudentSpec (backbone -> head)",
                left: (0, backbone.out_dim()),
                right: (0, head.in_dim()),
            });
        }
        Ok(Self { backbone, head })
    }

    /// Backbone `in -> hidden.. -> features` with ReLU hidden layers and a
    /// linear feature layer, plus a linear head. Rectified features would
    /// let a dead row reach the projector as an exact zero.
    pub fn mlp(in_dim: usize, hidden: &[usize], feat_dim: usize, num_classes: usize) -> Result<Self> {
        let mut dims = vec![in_dim];
        dims.extend_from_slice(hidden);
        dims.push(feat_dim);
        let backbone = MlpSpec::new(dims)?;
        Self::new(backbone, MlpSpec::new(vec![feat_dim, num_classes])?)
    }

    pub fn init(&self, seed: u64) -> Result<Classifier> {
        Ok(Classifier {
            backbone: Network::init(self.backbone.clone(), mix_seed(&[seed, TAG_BACKBONE]))?,
            head: Network::init(self.head.clone(), mix_seed(&[seed, TAG_HEAD]))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub backbone: Network,
    pub head: Network,
}

impl Classifier {
    pub fn logits(&self, x: &Matrix<f64>) -> Result<Matrix<f64>> {
        self.head.predict(&self.backbone.predict(x)?)
    }
}

/// Fraction of rows whose argmax matches the label. Ties go to the lowest
/// class index. An empty set scores 0.
pub fn accuracy(logits: &Matrix<f64>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = logits
        .iter_rows()
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    hits as f64 / labels.len() as f64
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Accuracy on un-augmented inputs.
pub fn evaluate(model: &Classifier, data: &Dataset) -> Result<f64> {
    Ok(accuracy(&model.logits(&data.features)?, &data.labels))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedObjective {
    #[default]
    AlignUniform,
    Infonce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogitLoss {
    #[default]
    Kd,
    Srrl,
}

/// Distillation choices beyond the loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSetup {
    pub projector: ProjectorKind,
    pub projection_dim: usize,
    pub embed_objective: EmbedObjective,
    pub include_positive: bool,
    pub logit_loss: LogitLoss,
}

impl Default for DistillSetup {
    fn default() -> Self {
        Self {
            projector: ProjectorKind::default(),
            projection_dim: DEFAULT_PROJECTION_DIM,
            embed_objective: EmbedObjective::default(),
            include_positive: true,
            logit_loss: LogitLoss::default(),
        }
    }
}

/// Frozen teacher, either run in-process on the same augmented view as
/// the student or read from precomputed rows aligned with the task.
#[derive(Debug, Clone, Copy)]
pub enum TeacherSource<'a> {
    Live {
        backbone: &'a Network,
        head: Option<&'a Network>,
    },
    Dump {
        features: &'a Matrix<f64>,
        logits: Option<&'a Matrix<f64>>,
    },
}

impl TeacherSource<'_> {
    pub fn feat_dim(&self) -> usize {
        match self {
            TeacherSource::Live { backbone, .. } => backbone.spec.out_dim(),
            TeacherSource::Dump { features, .. } => features.cols(),
        }
    }

    fn logit_dim(&self) -> Option<usize> {
        match self {
            TeacherSource::Live { head, .. } => head.map(|h| h.spec.out_dim()),
            TeacherSource::Dump { logits, .. } => logits.map(|l| l.cols()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Classifier,
    /// Student and teacher projectors, when the embedding term was active.
    pub projectors: Option<(Network, Network)>,
    pub connector: Option<Network>,
    pub metrics: Vec<EpochMetrics>,
    /// Phase cost under the configured clock.
    pub seconds: f64,
}

/// Cross-entropy training of a freshly initialized classifier.
pub fn train_scratch(
    student: &StudentSpec,
    task: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    phase: &str,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = student.init(cfg.seed)?;
    check_task(&model, task)?;
    let weights = ce_only();
    Fit {
        phase,
        task,
        eval,
        cfg,
        weights: &weights,
        setup: &DistillSetup::default(),
        teacher: None,
        freeze_backbone: false,
    }
    .run(model, None, None)
}

/// Trains a fresh head on top of a frozen backbone.
pub fn linear_probe(
    backbone: &Network,
    head_spec: &MlpSpec,
    task: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    phase: &str,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let spec = StudentSpec::new(backbone.spec.clone(), head_spec.clone())?;
    let model = Classifier {
        backbone: backbone.clone(),
        head: Network::init(spec.head, mix_seed(&[cfg.seed, TAG_HEAD]))?,
    };
    check_task(&model, task)?;
    let weights = ce_only();
    let out = Fit {
        phase,
        task,
        eval,
        cfg,
        weights: &weights,
        setup: &DistillSetup::default(),
        teacher: None,
        freeze_backbone: true,
    }
    .run(model, None, None)?;
    if !out.model.backbone.params.bit_identical(&backbone.params) {
        return Err(Error::FrozenMutated("linear_probe backbone"));
    }
    Ok(out)
}

/// Trains a fresh student against a frozen teacher with
/// `lambda1 * CE + lambda2 * embed + lambda3 * logit`.
///
/// Terms with zero weight are skipped entirely, including the teacher
/// forward pass and their cost, so `lambda2 = lambda3 = 0` is exactly
/// [`train_scratch`] and needs no teacher.
pub fn distill(
    teacher: Option<TeacherSource<'_>>,
    student: &StudentSpec,
    setup: &DistillSetup,
    weights: &LossWeights,
    task: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    weights.validate()?;
    let model = student.init(cfg.seed)?;
    check_task(&model, task)?;

    let use_embed = weights.lambda2 > 0.0;
    let use_logit = weights.lambda3 > 0.0;
    let teacher = if use_embed || use_logit {
        let t = teacher.ok_or(Error::MissingComponent {
            component: "teacher",
            weight: if use_embed { "lambda2" } else { "lambda3" },
        })?;
        check_teacher(&t, setup, cfg, task, use_logit)?;
        Some(t)
    } else {
        None
    };

    let projectors = if use_embed {
        if setup.projection_dim == 0 {
            return Err(Error::Config {
                key: "projection_dim".into(),
                message: "must be >= 1".into(),
            });
        }
        let t = teacher.as_ref().expect("checked above");
        let s_spec = make_projector(setup.projector, student.backbone.out_dim(), setup.projection_dim)?;
        let t_spec = make_projector(setup.projector, t.feat_dim(), setup.projection_dim)?;
        Some((
            Network::init(s_spec, mix_seed(&[cfg.seed, TAG_PROJ_S]))?,
            Network::init(t_spec, mix_seed(&[cfg.seed, TAG_PROJ_T]))?,
        ))
    } else {
        None
    };
    let connector = if use_logit && setup.logit_loss == LogitLoss::Srrl {
        let t = teacher.as_ref().expect("checked above");
        let c = make_connector(student.backbone.out_dim(), t.feat_dim())?;
        Some(Network::init(c, mix_seed(&[cfg.seed, TAG_CONNECTOR]))?)
    } else {
        None
    };

    let snapshot = match teacher {
        Some(TeacherSource::Live { backbone, head }) => Some((backbone.params.clone(), head.map(|h| h.params.clone()))),
        _ => None,
    };
    let out = Fit {
        phase: PHASE_TRAIN,
        task,
        eval,
        cfg,
        weights,
        setup,
        teacher,
        freeze_backbone: false,
    }
    .run(model, projectors, connector)?;
    if let (Some((b, h)), Some(TeacherSource::Live { backbone, head })) = (snapshot, teacher) {
        if !b.bit_identical(&backbone.params) {
            return Err(Error::FrozenMutated("teacher backbone"));
        }
        if let (Some(h), Some(head)) = (h, head) {
            if !h.bit_identical(&head.params) {
                return Err(Error::FrozenMutated("teacher head"));
            }
        }
    }
    Ok(out)
}

fn ce_only() -> LossWeights {
    LossWeights {
        lambda1: 1.0,
        lambda2: 0.0,
        lambda3: 0.0,
        ..LossWeights::default()
    }
}

fn check_task(model: &Classifier, task: &Dataset) -> Result<()> {
    if task.dim() != model.backbone.spec.in_dim() {
        return Err(Error::ShapeMismatch {
            op: "task features -> backbone",
            left: task.features.shape(),
            right: (task.len(), model.backbone.spec.in_dim()),
        });
    }
    if task.num_classes != model.head.spec.out_dim() {
        return Err(Error::InvalidArgument(format!(
            "task has {} classes, head outputs {}",
            task.num_classes,
            model.head.spec.out_dim()
        )));
    }
    if task.len() < 2 {
        return Err(Error::InsufficientBatch {
            op: "training",
            needed: 2,
            got: task.len(),
        });
    }
    Ok(())
}

fn check_teacher(t: &TeacherSource<'_>, setup: &DistillSetup, cfg: &TrainConfig, task: &Dataset, use_logit: bool) -> Result<()> {
    match t {
        TeacherSource::Live { backbone, head } => {
            if backbone.spec.in_dim() != task.dim() {
                return Err(Error::ShapeMismatch {
                    op: "task features -> teacher backbone",
                    left: task.features.shape(),
                    right: (task.len(), backbone.spec.in_dim()),
                });
            }
            if let Some(h) = head {
                if h.spec.in_dim() != backbone.spec.out_dim() {
                    return Err(Error::ShapeMismatch {
                        op: "teacher backbone -> head",
                        left: (0, backbone.spec.out_dim()),
                        right: (0, h.spec.in_dim()),
                    });
                }
            }
        }
        TeacherSource::Dump { features, logits } => {
            if !cfg.augment.is_identity() {
                return Err(Error::Config {
                    key: "augment".into(),
                    message: "a dumped teacher cannot see augmented inputs; use identity augmentation".into(),
                });
            }
            if features.rows() != task.len() {
                return Err(Error::ShapeMismatch {
                    op: "teacher dump rows vs task rows",
                    left: features.shape(),
                    right: (task.len(), features.cols()),
                });
            }
            if let Some(l) = logits {
                if l.rows() != task.len() {
                    return Err(Error::ShapeMismatch {
                        op: "teacher dump logits vs task rows",
                        left: l.shape(),
                        right: (task.len(), l.cols()),
                    });
                }
            }
        }
    }
    if use_logit {
        match setup.logit_loss {
            LogitLoss::Kd => {
                let dim = t.logit_dim().ok_or(Error::MissingComponent {
                    component: "teacher logits",
                    weight: "lambda3",
                })?;
                if dim != task.num_classes {
                    return Err(Error::InvalidArgument(format!(
                        "teacher has {dim} logits, task has {} classes",
                        task.num_classes
                    )));
                }
            }
            LogitLoss::Srrl => {
                let TeacherSource::Live { head: Some(h), .. } = t else {
                    return Err(Error::MissingComponent {
                        component: "live teacher head (srrl)",
                        weight: "lambda3",
                    });
                };
                if h.spec.out_dim() != task.num_classes {
                    return Err(Error::InvalidArgument(format!(
                        "teacher head has {} outputs, task has {} classes",
                        h.spec.out_dim(),
                        task.num_classes
                    )));
                }
            }
        }
    }
    Ok(())
}

struct Fit<'a> {
    phase: &'a str,
    task: &'a Dataset,
    eval: Option<&'a Dataset>,
    cfg: &'a TrainConfig,
    weights: &'a LossWeights,
    setup: &'a DistillSetup,
    teacher: Option<TeacherSource<'a>>,
    freeze_backbone: bool,
}

/// Sample-weighted sums of the reported loss terms.
#[derive(Default)]
struct Sums {
    n: f64,
    total: f64,
    ce: f64,
    align: f64,
    uniform: f64,
    logit: f64,
}

struct Optimizers {
    student: OptimizerState,
    projectors: OptimizerState,
    connector: OptimizerState,
}

impl Fit<'_> {
    fn run(
        &self,
        mut model: Classifier,
        mut projectors: Option<(Network, Network)>,
        mut connector: Option<Network>,
    ) -> Result<TrainOutcome> {
        let cfg = self.cfg;
        let mut opt = Optimizers {
            student: OptimizerState::new(cfg.optimizer),
            projectors: OptimizerState::new(cfg.optimizer),
            connector: OptimizerState::new(cfg.optimizer),
        };
        let mut clock = Stopwatch::new(cfg.clock);
        let macs = self.macs_per_sample(&model, projectors.as_ref(), connector.as_ref());
        let batch_seed = mix_seed(&[cfg.seed, TAG_BATCHES]);
        let mut metrics = Vec::with_capacity(cfg.epochs);

        for epoch in 0..cfg.epochs {
            let mut sums = Sums::default();
            let batches = batch_iter(self.task.len(), cfg.batch_size, epoch as u64, batch_seed)?;
            for (b, idx) in batches.iter().enumerate() {
                let aug_seed = mix_seed(&[cfg.seed, TAG_AUGMENT, epoch as u64, b as u64]);
                clock.time(macs * idx.len() as u64, || {
                    self.step(idx, aug_seed, &mut model, projectors.as_mut(), connector.as_mut(), &mut opt, &mut sums)
                })
                .map_err(|e| match e {
                    Error::Divergence(msg) => Error::Divergence(format!("{} epoch {} batch {b}: {msg}", self.phase, epoch + 1)),
                    Error::ZeroNormRow { op, row } => Error::Divergence(format!(
                        "{} epoch {} batch {b}: {op} got a zero embedding at batch row {row}",
                        self.phase,
                        epoch + 1
                    )),
                    other => other,
                })?;
            }
            let eval_acc = evaluate(&model, self.eval.unwrap_or(self.task))?;
            let n = sums.n.max(1.0);
            metrics.push(EpochMetrics {
                epoch: epoch + 1,
                phase: self.phase.to_string(),
                loss_total: sums.total / n,
                loss_ce: sums.ce / n,
                loss_align: sums.align / n,
                loss_uniform: sums.uniform / n,
                loss_kd: sums.logit / n,
                eval_acc,
                seconds: clock.seconds(),
            });
            log::debug!(
                "{} epoch {}: loss {:.6} acc {:.4}",
                self.phase,
                epoch + 1,
                sums.total / n,
                eval_acc
            );
        }
        Ok(TrainOutcome {
            model,
            projectors,
            connector,
            metrics,
            seconds: clock.seconds(),
        })
    }

    /// Counted cost of one training sample: forward passes of frozen
    /// networks, forward plus twice-forward backward for trained ones.
    fn macs_per_sample(&self, model: &Classifier, projectors: Option<&(Network, Network)>, connector: Option<&Network>) -> u64 {
        let bb = model.backbone.macs_per_sample();
        let hd = model.head.macs_per_sample();
        let mut macs = if self.freeze_backbone { bb + 3 * hd } else { 3 * (bb + hd) };
        let use_embed = self.weights.lambda2 > 0.0;
        let use_logit = self.weights.lambda3 > 0.0;
        if let Some(TeacherSource::Live { backbone, head }) = self.teacher {
            if use_embed || use_logit {
                macs += backbone.macs_per_sample();
            }
            if use_logit {
                macs += head.map_or(0, |h| h.macs_per_sample());
            }
        }
        if let Some((s, t)) = projectors {
            macs += 3 * (s.macs_per_sample() + t.macs_per_sample());
        }
        if let (Some(c), Some(TeacherSource::Live { head: Some(h), .. })) = (connector, self.teacher) {
            // connector trained; classifier forward and input-gradient pass
            macs += 3 * c.macs_per_sample() + 2 * h.macs_per_sample();
        }
        macs
    }

    #[allow(clippy::too_many_arguments)]
    fn step(
        &self,
        idx: &[usize],
        aug_seed: u64,
        model: &mut Classifier,
        projectors: Option<&mut (Network, Network)>,
        connector: Option<&mut Network>,
        opt: &mut Optimizers,
        sums: &mut Sums,
    ) -> Result<()> {
        let w = self.weights;
        let (xb, yb) = self.task.batch(idx);
        let x = input_augment(&xb, &self.cfg.augment, aug_seed);

        let (h_s, bb_cache) = if self.freeze_backbone {
            (model.backbone.predict(&x)?, None)
        } else {
            let (h, c) = model.backbone.forward(&x)?;
            (h, Some(c))
        };
        let (logits, head_cache) = model.head.forward(&h_s)?;

        let mut parts = LossComponents {
            ce: Some(ce_loss(&logits, &yb)?),
            ..Default::default()
        };

        let use_embed = w.lambda2 > 0.0;
        let use_logit = w.lambda3 > 0.0;
        let h_t = match self.teacher {
            Some(TeacherSource::Live { backbone, .. }) if use_embed || use_logit => Some(backbone.predict(&x)?),
            Some(TeacherSource::Dump { features, .. }) if use_embed || use_logit => Some(features.select_rows(idx)),
            _ => None,
        };

        let mut proj_caches = None;
        if let Some((g_s, g_t)) = projectors.as_deref() {
            let h_t = h_t.as_ref().expect("teacher features");
            let (zs, cs) = g_s.forward(&h_s)?;
            let (zt, ct) = g_t.forward(h_t)?;
            parts.embed = Some(match self.setup.embed_objective {
                EmbedObjective::AlignUniform => embed_loss(&zs, &zt, w)?,
                EmbedObjective::Infonce => infonce_distill(&zs, &zt, w.nce_temperature, self.setup.include_positive)?,
            });
            proj_caches = Some((cs, ct));
        }

        if use_logit {
            let h_t = h_t.as_ref().expect("teacher features");
            let t_logits = match self.teacher {
                Some(TeacherSource::Live { head: Some(head), .. }) => head.predict(h_t)?,
                Some(TeacherSource::Dump { logits: Some(l), .. }) => l.select_rows(idx),
                _ => unreachable!("teacher logits checked before training"),
            };
            parts.logit = Some(match (self.setup.logit_loss, connector.as_deref(), self.teacher) {
                (LogitLoss::Kd, _, _) => kd_loss(&logits, &t_logits, w.kd_temperature)?,
                (LogitLoss::Srrl, Some(conn), Some(TeacherSource::Live { head: Some(head), .. })) => srrl_logit_loss(
                    &h_s,
                    SrrlChain {
                        connector_spec: &conn.spec,
                        connector: &conn.params,
                        classifier_spec: &head.spec,
                        classifier: &head.params,
                    },
                    &t_logits,
                )?,
                _ => unreachable!("srrl requirements checked before training"),
            });
        }

        let total = total_loss(&parts, w)?;
        if !total.value.is_finite() {
            return Err(Error::Divergence(format!("loss is {}", total.value)));
        }

        // backward: head, projectors and connector feed the feature gradient
        let mut grad_h: Option<Matrix<f64>> = None;
        let mut add = |g: Matrix<f64>| -> Result<()> {
            match grad_h.as_mut() {
                None => grad_h = Some(g),
                Some(acc) => acc.axpy(1.0, &g)?,
            }
            Ok(())
        };
        let head_grads = match total.grad(keys::STUDENT_LOGITS) {
            Some(g) => {
                let (pg, gh) = model.head.backward(&head_cache, g)?;
                add(gh)?;
                pg
            }
            None => model.head.params.zeros_like(),
        };
        let mut proj_grads = None;
        if let (Some((g_s, g_t)), Some((cs, ct))) = (projectors.as_deref(), proj_caches.as_ref()) {
            let zero_s;
            let gzs = match total.grad(keys::ZS) {
                Some(g) => g,
                None => {
                    zero_s = Matrix::zeros(h_s.rows(), g_s.spec.out_dim());
                    &zero_s
                }
            };
            let (ps, gh) = g_s.backward(cs, gzs)?;
            add(gh)?;
            let pt = match total.grad(keys::ZT) {
                Some(g) => g_t.backward(ct, g)?.0,
                None => g_t.params.zeros_like(),
            };
            proj_grads = Some((ps, pt));
        }
        let mut conn_grads = None;
        if let Some(conn) = connector.as_deref() {
            if let Some(g) = total.grad(keys::STUDENT_FEATURES) {
                add(g.clone())?;
            }
            conn_grads = Some(connector_grads(&total, conn)?);
        }

        if let Some(cache) = bb_cache {
            let g = grad_h.unwrap_or_else(|| Matrix::zeros(h_s.rows(), h_s.cols()));
            let (bb_grads, _) = model.backbone.backward(&cache, &g)?;
            step_models(
                &mut [&mut model.backbone.params, &mut model.head.params],
                &[&bb_grads, &head_grads],
                &mut opt.student,
            )?;
        } else {
            step_model(&mut model.head.params, &head_grads, &mut opt.student)?;
        }
        if let (Some((g_s, g_t)), Some((ps, pt))) = (projectors, proj_grads) {
            step_models(&mut [&mut g_s.params, &mut g_t.params], &[&ps, &pt], &mut opt.projectors)?;
        }
        if let (Some(conn), Some(cg)) = (connector, conn_grads) {
            step_model(&mut conn.params, &cg, &mut opt.connector)?;
        }

        let n = idx.len() as f64;
        sums.n += n;
        sums.total += n * total.value;
        sums.ce += n * parts.ce.as_ref().map_or(0.0, |r| r.value);
        if let Some(e) = &parts.embed {
            sums.align += n * e.term("align").unwrap_or(0.0);
            sums.uniform += n * e.term("uniform").unwrap_or(0.0);
        }
        sums.logit += n * parts.logit.as_ref().map_or(0.0, |r| r.value);
        Ok(())
    }
}

fn connector_grads(total: &crate::losses::LossResult<f64>, conn: &Network) -> Result<ParamGrads<f64>> {
    let mut grads = conn.params.zeros_like();
    for (l, layer) in grads.layers.iter_mut().enumerate() {
        if let Some(g) = total.grad(&keys::connector_weight(l)) {
            layer.weight = g.clone();
        }
        if let Some(g) = total.grad(&keys::connector_bias(l)) {
            layer.bias = g.as_slice().to_vec();
        }
    }
    grads.check_spec(&conn.spec)?;
    Ok(grads)
}
