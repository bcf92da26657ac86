//! Desk-scale benchmark: a teacher pretrained on a large Gaussian
//! foundation set, a small student, and a task sliced from the same world,
//! compared across the six training recipes in two data regimes.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{augment_nx, derive_task, gen_foundation, AugmentPolicy, GaussianWorld, GaussianWorldSpec, TaskSampler, TaskSplit};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::models::MlpSpec;
use crate::trainer::metrics::format_sig9;
use crate::trainer::{
    distill, evaluate, ledger_report, linear_probe, train_scratch, AdamWConfig, ClockMode, CostLedger, DistillSetup,
    EpochMetrics, Phase, ReportMode, Stopwatch, StudentSpec, TeacherSource, TrainConfig, PHASE_PRETRAIN, PHASE_PROBE,
    PHASE_TRAIN,
};

/// Backbone `input -> hidden.. -> feat_dim`, see [`StudentSpec::mlp`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetShape {
    pub hidden: Vec<usize>,
    pub feat_dim: usize,
}

impl NetShape {
    pub fn classifier(&self, in_dim: usize, num_classes: usize) -> Result<StudentSpec> {
        StudentSpec::mlp(in_dim, &self.hidden, self.feat_dim, num_classes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub world: GaussianWorldSpec,
    pub foundation_per_class: usize,
    /// Task classes, as indices into the world.
    pub task_classes: Vec<usize>,
    pub abundant_per_class: usize,
    pub limited_per_class: usize,
    pub test_per_class: usize,
    /// One world and one training seed per entry.
    pub seeds: Vec<u64>,
    pub n_synthetic: Vec<usize>,
    pub teacher: NetShape,
    pub student: NetShape,
    pub pretrain_epochs: usize,
    pub probe_epochs: usize,
    pub train_epochs: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub distill: DistillSetup,
    pub optimizer: AdamWConfig,
    pub augment: AugmentPolicy,
    pub clock: ClockMode,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            world: GaussianWorldSpec {
                num_classes: 40,
                dim: 16,
                mean_scale: 1.0,
                cluster_std: 1.0,
                seed: 9,
            },
            foundation_per_class: 500,
            task_classes: (0..10).collect(),
            abundant_per_class: 100,
            limited_per_class: 10,
            test_per_class: 100,
            seeds: vec![9, 10, 11, 12, 13],
            n_synthetic: vec![0, 1, 2],
            teacher: NetShape {
                hidden: vec![96],
                feat_dim: 64,
            },
            student: NetShape {
                hidden: vec![32],
                feat_dim: 16,
            },
            pretrain_epochs: 30,
            probe_epochs: 60,
            train_epochs: 60,
            batch_size: 64,
            weights: LossWeights::default(),
            distill: DistillSetup {
                projection_dim: 16,
                ..DistillSetup::default()
            },
            optimizer: AdamWConfig::default(),
            augment: AugmentPolicy::default(),
            clock: ClockMode::Counted,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.weights.validate()?;
        let cfg = |key: &str, message: &str| Error::Config {
            key: key.into(),
            message: message.into(),
        };
        if self.seeds.is_empty() {
            return Err(cfg("bench.seeds", "at least one seed is required"));
        }
        if self.n_synthetic.is_empty() {
            return Err(cfg("bench.n_synthetic", "at least one n is required"));
        }
        for (key, v) in [
            ("bench.foundation_per_class", self.foundation_per_class),
            ("bench.abundant_per_class", self.abundant_per_class),
            ("bench.limited_per_class", self.limited_per_class),
            ("bench.test_per_class", self.test_per_class),
        ] {
            if v == 0 {
                return Err(cfg(key, "must be >= 1"));
            }
        }
        TaskSampler::new(&self.world, &self.task_classes).map_err(|e| cfg("bench.task_classes", &e.to_string()))?;
        self.train_config(0, 1).validate()
    }

    fn train_config(&self, seed: u64, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: self.batch_size,
            seed,
            optimizer: self.optimizer,
            augment: self.augment,
            clock: self.clock,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Abundant,
    Limited,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Abundant => "abundant",
            Regime::Limited => "limited",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub regime: Regime,
    /// `S-FR`, `S-LP`, `T-LP` or `A/U(nx)`.
    pub method: String,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Mean over seeds of the ledger total for this recipe.
    pub ledger_seconds: f64,
    /// Every training run behind the row ended below its first-epoch loss.
    pub loss_decreased: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Every phase of every run, summed.
    pub ledger: CostLedger,
}

impl BenchReport {
    pub fn row(&self, regime: Regime, method: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.regime == regime && r.method == method)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("regime,method,seeds,acc_mean,acc_std,ledger_seconds,loss_decreased,acc_per_seed\n");
        for r in &self.rows {
            let per_seed: Vec<String> = r.accuracies.iter().map(|&a| format_sig9(a)).collect();
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.regime.name(),
                r.method,
                r.accuracies.len(),
                format_sig9(r.mean),
                format_sig9(r.std),
                format_sig9(r.ledger_seconds),
                r.loss_decreased,
                per_seed.join(";")
            )
            .expect("string write");
        }
        out
    }

    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<9} {:<9} {:>8} {:>7} {:>12}\n",
            "regime", "method", "acc %", "+-", "ledger s"
        );
        for r in &self.rows {
            writeln!(
                out,
                "{:<9} {:<9} {:>8.2} {:>7.2} {:>12.4}",
                r.regime.name(),
                r.method,
                100.0 * r.mean,
                100.0 * r.std,
                r.ledger_seconds
            )
            .expect("string write");
        }
        out
    }
}

pub fn au_label(n: usize) -> String {
    format!("A/U({n}x)")
}

fn decreased(m: &[EpochMetrics]) -> bool {
    match (m.first(), m.last()) {
        (Some(a), Some(b)) => m.len() < 2 || b.loss_total < a.loss_total,
        _ => true,
    }
}

struct Cell {
    acc: f64,
    seconds: f64,
    decreased: bool,
}

/// Runs the full protocol: per seed, teacher and student pretraining on
/// the foundation set; per regime, teacher probe, student scratch,
/// student probe and A/U distillation for each `n`.
pub fn desk_benchmark(config: &BenchConfig) -> Result<BenchReport> {
    config.validate()?;
    let regimes = [Regime::Abundant, Regime::Limited];
    let methods: Vec<String> = ["S-FR", "S-LP", "T-LP"]
        .into_iter()
        .map(String::from)
        .chain(config.n_synthetic.iter().map(|&n| au_label(n)))
        .collect();
    // cells[regime][method][seed]
    let mut cells: Vec<Vec<Vec<Cell>>> = regimes
        .iter()
        .map(|_| methods.iter().map(|_| Vec::new()).collect())
        .collect();
    let mut total = CostLedger::new();

    for &seed in &config.seeds {
        let world_spec = GaussianWorldSpec {
            seed,
            ..config.world
        };
        let dim = world_spec.dim;
        let k = config.task_classes.len();
        log::info!("bench seed {seed}: pretraining on foundation");
        let foundation = gen_foundation(&world_spec, config.foundation_per_class)?;
        let teacher = train_scratch(
            &config.teacher.classifier(dim, world_spec.num_classes)?,
            &foundation,
            None,
            &config.train_config(seed, config.pretrain_epochs),
            PHASE_PRETRAIN,
        )?;
        let student_pre = train_scratch(
            &config.student.classifier(dim, world_spec.num_classes)?,
            &foundation,
            None,
            &config.train_config(seed, config.pretrain_epochs),
            PHASE_PRETRAIN,
        )?;
        total.record(Phase::TeacherPretrain, teacher.seconds)?;
        total.record(Phase::StudentPretrain, student_pre.seconds)?;

        let sampler = TaskSampler::new(&world_spec, &config.task_classes)?;
        let test = derive_task(&world_spec, &config.task_classes, config.test_per_class, TaskSplit::Test)?;
        let student_spec = config.student.classifier(dim, k)?;
        let probe_cfg = config.train_config(seed, config.probe_epochs);
        let train_cfg = config.train_config(seed, config.train_epochs);

        for (ri, &regime) in regimes.iter().enumerate() {
            let per_class = match regime {
                Regime::Abundant => config.abundant_per_class,
                Regime::Limited => config.limited_per_class,
            };
            let task = derive_task(&world_spec, &config.task_classes, per_class, TaskSplit::Train)?;
            let mut ledger = CostLedger::new();
            ledger.record(Phase::TeacherPretrain, teacher.seconds)?;
            ledger.record(Phase::StudentPretrain, student_pre.seconds)?;

            let t_lp = linear_probe(
                &teacher.model.backbone,
                &MlpSpec::new(vec![config.teacher.feat_dim, k])?,
                &task,
                Some(&test),
                &probe_cfg,
                PHASE_PROBE,
            )?;
            ledger.record(Phase::TeacherFinetune, t_lp.seconds)?;
            let s_fr = train_scratch(&student_spec, &task, Some(&test), &train_cfg, PHASE_TRAIN)?;
            ledger.record(Phase::Scratch, s_fr.seconds)?;
            let s_lp = linear_probe(
                &student_pre.model.backbone,
                &student_spec.head,
                &task,
                Some(&test),
                &probe_cfg,
                PHASE_PROBE,
            )?;
            ledger.record(Phase::StudentProbe, s_lp.seconds)?;

            let row = &mut cells[ri];
            row[0].push(Cell {
                acc: evaluate(&s_fr.model, &test)?,
                seconds: ledger_report(&ledger, ReportMode::Scratch)?.total,
                decreased: decreased(&s_fr.metrics),
            });
            row[1].push(Cell {
                acc: evaluate(&s_lp.model, &test)?,
                seconds: ledger_report(&ledger, ReportMode::PretrainLp)?.total,
                decreased: decreased(&s_lp.metrics) && decreased(&student_pre.metrics),
            });
            row[2].push(Cell {
                acc: evaluate(&t_lp.model, &test)?,
                seconds: ledger.get(Phase::TeacherFinetune).unwrap_or(0.0),
                decreased: decreased(&t_lp.metrics) && decreased(&teacher.metrics),
            });

            let teacher_src = TeacherSource::Live {
                backbone: &t_lp.model.backbone,
                head: Some(&t_lp.model.head),
            };
            for (j, &n) in config.n_synthetic.iter().enumerate() {
                let mut gen_clock = Stopwatch::new(config.clock);
                let generated = (n * task.len()) as u64;
                let transfer = gen_clock.time(generated * GaussianWorld::macs_per_sample(sampler.world()), || {
                    augment_nx(&task, &sampler, n, seed)
                })?;
                let au = distill(
                    Some(teacher_src),
                    &student_spec,
                    &config.distill,
                    &config.weights,
                    &transfer,
                    Some(&test),
                    &train_cfg,
                )?;
                let mut l = ledger.clone();
                l.set(Phase::Generation, gen_clock.seconds())?;
                l.set(Phase::Distill, au.seconds)?;
                total.record(Phase::Generation, gen_clock.seconds())?;
                total.record(Phase::Distill, au.seconds)?;
                row[3 + j].push(Cell {
                    acc: evaluate(&au.model, &test)?,
                    seconds: ledger_report(&l, ReportMode::AuNx)?.total,
                    decreased: decreased(&au.metrics),
                });
            }
            for p in [Phase::TeacherFinetune, Phase::Scratch, Phase::StudentProbe] {
                total.record(p, ledger.get(p).unwrap_or(0.0))?;
            }
            log::info!(
                "bench seed {seed} {}: S-FR {:.3} S-LP {:.3} T-LP {:.3} A/U {:?}",
                regime.name(),
                row[0].last().map_or(0.0, |c| c.acc),
                row[1].last().map_or(0.0, |c| c.acc),
                row[2].last().map_or(0.0, |c| c.acc),
                row[3..].iter().map(|c| c.last().map_or(0.0, |c| c.acc)).collect::<Vec<_>>()
            );
        }
    }

    let mut rows = Vec::new();
    for (ri, &regime) in regimes.iter().enumerate() {
        for (mi, method) in methods.iter().enumerate() {
            let c = &cells[ri][mi];
            let accuracies: Vec<f64> = c.iter().map(|c| c.acc).collect();
            let (mean, std) = mean_std(&accuracies);
            rows.push(BenchRow {
                regime,
                method: method.clone(),
                accuracies,
                mean,
                std,
                ledger_seconds: c.iter().map(|c| c.seconds).sum::<f64>() / c.len() as f64,
                loss_decreased: c.iter().all(|c| c.decreased),
            });
        }
    }
    Ok(BenchReport { rows, ledger: total })
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
