//! `aukd`: one process per pipeline stage, artifacts on disk in between.
//!
//! ```text
//! <out>/data/*.kdxd             foundation, task train/test, transfer sets
//! <out>/models/*.kdpm           checkpoints
//! <out>/<command>/metrics.csv   per-epoch metrics
//! <out>/<command>/config.resolved
//! <out>/ledger.txt              cost ledger shared by the pipeline stages
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aukd_core::config::{resolve, ExperimentConfig, Override};
use aukd_core::data::{
    augment_nx, derive_task, gen_foundation, read_dump, write_dump, Dataset, GaussianWorld, TaskSampler, TaskSplit,
};
use aukd_core::models::{load_params, save_params, MlpSpec};
use aukd_core::trainer::{
    distill, evaluate, linear_probe, metrics_csv, train_scratch, Classifier, CostLedger, EpochMetrics, Network, Phase,
    Stopwatch, TeacherSource, TrainOutcome, PHASE_PRETRAIN, PHASE_PROBE, PHASE_TRAIN,
};
use aukd_core::verify::bench::desk_benchmark;
use aukd_core::verify::{
    analytic_checks, gradient_suite, infonce_limit_sweep, uniformity_optimize_oracle, CorrelatedSphere, SweepOptions,
    UniformityOptions, LIMIT_M_LIST, LIMIT_ORACLE_M,
};
use aukd_core::{Error, FormatError, Matrix};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "aukd", version, about = "Alignment/uniformity contrastive distillation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML config; documented defaults fill every missing key.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set world.dim=8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    n_synthetic: Option<usize>,
    /// Read teacher features (and logits, if present) from a KDXD dump.
    #[arg(long, global = true)]
    teacher_dump: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Sample the foundation set, the task splits and the transfer set.
    GenData,
    /// Train the teacher on the foundation set.
    PretrainTeacher,
    /// Fit a task head on the frozen teacher backbone.
    ProbeTeacher,
    /// Train the student on the task from random init.
    Scratch,
    /// Pretrain the student on the foundation set, then probe it.
    PretrainProbeStudent,
    /// Train the student on the transfer set against the frozen teacher.
    Distill,
    /// Run the desk benchmark table.
    Bench,
    /// Run the gradient, limit, uniformity and closed-form oracles.
    Verify,
}

impl Command {
    fn dir_name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::PretrainTeacher => "pretrain-teacher",
            Command::ProbeTeacher => "probe-teacher",
            Command::Scratch => "scratch",
            Command::PretrainProbeStudent => "pretrain-probe-student",
            Command::Distill => "distill",
            Command::Bench => "bench",
            Command::Verify => "verify",
        }
    }
}

#[derive(Debug)]
enum CliError {
    Core(Error),
    Missing(PathBuf),
    Io(PathBuf, std::io::Error),
    Verify(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        CliError::Core(Error::Format(e))
    }
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Core(Error::Format(_)) => "artifact",
            CliError::Core(Error::Divergence(_) | Error::NonFinite(_) | Error::ZeroNormRow { .. }) => "divergence",
            CliError::Core(Error::FrozenMutated(_) | Error::MissingPhase(_)) => "internal",
            CliError::Core(_) => "config",
            CliError::Missing(_) => "missing_artifact",
            CliError::Io(..) => "io",
            CliError::Verify(_) => "verify",
        }
    }

    fn code(&self) -> u8 {
        match self.kind() {
            "config" => 2,
            "artifact" | "missing_artifact" => 3,
            "divergence" => 4,
            "verify" => 5,
            _ => 1,
        }
    }
}

/// One line: `error kind=<kind> [key=".."] [path=".."] message=".."`.
impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error kind={}", self.kind())?;
        match self {
            CliError::Core(Error::Config { key, message }) => write!(f, " key={key:?} message={message:?}"),
            CliError::Core(Error::Format(FormatError::Io { path, source })) => {
                write!(f, " path={:?} message={:?}", path.display().to_string(), source.to_string())
            }
            CliError::Core(e) => write!(f, " message={:?}", e.to_string()),
            CliError::Missing(path) => write!(f, " path={:?} message=\"not found\"", path.display().to_string()),
            CliError::Io(path, e) => write!(f, " path={:?} message={:?}", path.display().to_string(), e.to_string()),
            CliError::Verify(m) => write!(f, " message={m:?}"),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command, &cli.common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}

fn overrides(common: &Common) -> CliResult<Vec<Override>> {
    let mut out = common
        .set
        .iter()
        .map(|s| Override::parse(s))
        .collect::<Result<Vec<_>, _>>()?;
    let int = |key: &str, v: u64| -> CliResult<Override> {
        let v = i64::try_from(v).map_err(|_| {
            CliError::Core(Error::Config {
                key: key.into(),
                message: format!("{v} exceeds the largest TOML integer"),
            })
        })?;
        Ok(Override::new(key, toml::Value::Integer(v)))
    };
    if let Some(v) = common.seed {
        out.push(int("seed", v)?);
    }
    if let Some(v) = common.epochs {
        out.push(int("epochs", v as u64)?);
    }
    if let Some(v) = common.n_synthetic {
        out.push(int("n_synthetic", v as u64)?);
    }
    if let Some(p) = &common.out {
        out.push(Override::new("out", toml::Value::String(p.display().to_string())));
    }
    if let Some(p) = &common.teacher_dump {
        out.push(Override::new("dump_path", toml::Value::String(p.display().to_string())));
        out.push(Override::new("teacher_from_dump", toml::Value::Boolean(true)));
    }
    Ok(out)
}

fn load_config(common: &Common) -> CliResult<ExperimentConfig> {
    let text = match &common.config {
        Some(path) => std::fs::read_to_string(path).map_err(|e| {
            CliError::Core(Error::Config {
                key: "--config".into(),
                message: format!("{}: {e}", path.display()),
            })
        })?,
        None => String::new(),
    };
    Ok(resolve(&text, &overrides(common)?)?)
}

fn run(command: Command, common: &Common) -> CliResult<()> {
    let cfg = load_config(common)?;
    let run = Run::new(&cfg, command)?;
    match command {
        Command::GenData => run.gen_data(),
        Command::PretrainTeacher => run.pretrain_teacher(),
        Command::ProbeTeacher => run.probe_teacher(),
        Command::Scratch => run.scratch(),
        Command::PretrainProbeStudent => run.pretrain_probe_student(),
        Command::Distill => run.distill(),
        Command::Bench => run.bench(),
        Command::Verify => run.verify(),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.to_path_buf(), e))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

fn require(path: &Path) -> CliResult<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::Missing(path.to_path_buf()))
    }
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    dir: PathBuf,
}

impl<'a> Run<'a> {
    fn new(cfg: &'a ExperimentConfig, command: Command) -> CliResult<Self> {
        let dir = cfg.out.join(command.dir_name());
        write(&dir.join("config.resolved"), cfg.echo())?;
        Ok(Self { cfg, dir })
    }

    fn data(&self, name: &str) -> PathBuf {
        self.cfg.out.join("data").join(format!("{name}.kdxd"))
    }

    fn model(&self, name: &str) -> PathBuf {
        self.cfg.out.join("models").join(format!("{name}.kdpm"))
    }

    fn transfer_name(&self) -> String {
        format!("transfer_{}x", self.cfg.n_synthetic)
    }

    fn read_data(&self, name: &str, num_classes: usize) -> CliResult<Dataset> {
        let dump = read_dump(require(&self.data(name))?)?;
        Ok(Dataset::from_dump(&dump, num_classes)?)
    }

    fn write_data(&self, name: &str, data: &Dataset) -> CliResult<()> {
        let path = self.data(name);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.to_path_buf(), e))?;
        }
        Ok(write_dump(&data.to_dump(), &path)?)
    }

    fn load_net(&self, name: &str, spec: &MlpSpec) -> CliResult<Network> {
        let params = load_params(require(&self.model(name))?)?;
        Ok(Network::new(spec.clone(), params)?)
    }

    fn save_net(&self, name: &str, net: &Network) -> CliResult<()> {
        let path = self.model(name);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.to_path_buf(), e))?;
        }
        Ok(save_params(&net.params, &path)?)
    }

    fn save_classifier(&self, prefix: &str, model: &Classifier) -> CliResult<()> {
        self.save_net(&format!("{prefix}_backbone"), &model.backbone)?;
        self.save_net(&format!("{prefix}_head"), &model.head)
    }

    /// Sets `phases` in `<out>/ledger.txt`, keeping the others.
    fn charge(&self, phases: &[(Phase, f64)]) -> CliResult<()> {
        let path = self.cfg.out.join("ledger.txt");
        let mut ledger = if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|e| CliError::Io(path.clone(), e))?;
            CostLedger::from_text(&text)?
        } else {
            CostLedger::new()
        };
        for &(phase, seconds) in phases {
            ledger.set(phase, seconds)?;
        }
        write(&path, ledger.to_text())
    }

    fn write_metrics(&self, metrics: &[EpochMetrics]) -> CliResult<()> {
        write(&self.dir.join("metrics.csv"), metrics_csv(metrics))
    }

    fn report(&self, what: &str, out: &TrainOutcome, test: &Dataset) -> CliResult<()> {
        println!(
            "{what}: test accuracy {:.4}, {} epochs, {:.6} s",
            evaluate(&out.model, test)?,
            out.metrics.len(),
            out.seconds
        );
        Ok(())
    }

    fn dim(&self) -> usize {
        self.cfg.world.dim
    }

    fn k(&self) -> usize {
        self.cfg.num_task_classes()
    }

    fn task_splits(&self) -> CliResult<(Dataset, Dataset)> {
        Ok((
            self.read_data("task_train", self.k())?,
            self.read_data("task_test", self.k())?,
        ))
    }

    fn teacher_backbone_spec(&self) -> CliResult<MlpSpec> {
        Ok(self.cfg.teacher.classifier(self.dim(), self.cfg.world.num_classes)?.backbone)
    }

    fn teacher_head_spec(&self) -> CliResult<MlpSpec> {
        Ok(MlpSpec::new(vec![self.cfg.teacher.feat_dim, self.k()])?)
    }

    fn gen_data(&self) -> CliResult<()> {
        let c = self.cfg;
        let foundation = gen_foundation(&c.world, c.task.foundation_per_class)?;
        let train = derive_task(&c.world, &c.task.subset, c.task.per_class, TaskSplit::Train)?;
        let test = derive_task(&c.world, &c.task.subset, c.task.test_per_class, TaskSplit::Test)?;
        let sampler = TaskSampler::new(&c.world, &c.task.subset)?;
        let mut clock = Stopwatch::new(c.clock);
        let generated = (c.n_synthetic * train.len()) as u64;
        let transfer = clock.time(generated * GaussianWorld::macs_per_sample(sampler.world()), || {
            augment_nx(&train, &sampler, c.n_synthetic, c.seed)
        })?;
        self.write_data("foundation", &foundation)?;
        self.write_data("task_train", &train)?;
        self.write_data("task_test", &test)?;
        self.write_data(&self.transfer_name(), &transfer)?;
        self.charge(&[(Phase::Generation, clock.seconds())])?;
        println!(
            "foundation {} rows, task {} + {} test rows, {} {} rows",
            foundation.len(),
            train.len(),
            test.len(),
            self.transfer_name(),
            transfer.len()
        );
        Ok(())
    }

    fn pretrain_teacher(&self) -> CliResult<()> {
        let c = self.cfg;
        let foundation = self.read_data("foundation", c.world.num_classes)?;
        let spec = c.teacher.classifier(self.dim(), c.world.num_classes)?;
        let out = train_scratch(
            &spec,
            &foundation,
            None,
            &c.train_config(c.teacher.pretrain_epochs),
            PHASE_PRETRAIN,
        )?;
        self.save_net("teacher_backbone", &out.model.backbone)?;
        self.save_net("teacher_pretrain_head", &out.model.head)?;
        self.write_metrics(&out.metrics)?;
        self.charge(&[(Phase::TeacherPretrain, out.seconds)])?;
        self.report("teacher pretrain (foundation)", &out, &foundation)
    }

    fn probe_teacher(&self) -> CliResult<()> {
        let c = self.cfg;
        let (train, test) = self.task_splits()?;
        let backbone = self.load_net("teacher_backbone", &self.teacher_backbone_spec()?)?;
        let out = linear_probe(
            &backbone,
            &self.teacher_head_spec()?,
            &train,
            Some(&test),
            &c.train_config(c.teacher.probe_epochs),
            PHASE_PROBE,
        )?;
        self.save_net("teacher_head", &out.model.head)?;
        self.write_metrics(&out.metrics)?;
        self.charge(&[(Phase::TeacherFinetune, out.seconds)])?;
        self.report("teacher probe", &out, &test)
    }

    fn scratch(&self) -> CliResult<()> {
        let c = self.cfg;
        let (train, test) = self.task_splits()?;
        let spec = c.student.classifier(self.dim(), self.k())?;
        let out = train_scratch(&spec, &train, Some(&test), &c.train_config(c.epochs), PHASE_TRAIN)?;
        self.save_classifier("student_scratch", &out.model)?;
        self.write_metrics(&out.metrics)?;
        self.charge(&[(Phase::Scratch, out.seconds)])?;
        self.report("student scratch", &out, &test)
    }

    fn pretrain_probe_student(&self) -> CliResult<()> {
        let c = self.cfg;
        let foundation = self.read_data("foundation", c.world.num_classes)?;
        let (train, test) = self.task_splits()?;
        let pre = train_scratch(
            &c.student.classifier(self.dim(), c.world.num_classes)?,
            &foundation,
            None,
            &c.train_config(c.student.pretrain_epochs),
            PHASE_PRETRAIN,
        )?;
        let head = c.student.classifier(self.dim(), self.k())?.head;
        let probe = linear_probe(
            &pre.model.backbone,
            &head,
            &train,
            Some(&test),
            &c.train_config(c.student.probe_epochs),
            PHASE_PROBE,
        )?;
        self.save_net("student_pretrain_backbone", &pre.model.backbone)?;
        self.save_net("student_pretrain_head", &pre.model.head)?;
        self.save_net("student_probe_head", &probe.model.head)?;
        let mut metrics = pre.metrics.clone();
        metrics.extend(probe.metrics.iter().cloned());
        self.write_metrics(&metrics)?;
        self.charge(&[(Phase::StudentPretrain, pre.seconds), (Phase::StudentProbe, probe.seconds)])?;
        self.report("student pretrain + probe", &probe, &test)
    }

    fn distill(&self) -> CliResult<()> {
        let c = self.cfg;
        let weights = c.weights();
        let transfer = self.read_data(&self.transfer_name(), self.k())?;
        let test = self.read_data("task_test", self.k())?;
        let need_teacher = weights.lambda2 > 0.0 || weights.lambda3 > 0.0;
        let need_head = c.use_teacher_head && weights.lambda3 > 0.0;

        let mut dumped: Option<(Matrix, Option<Matrix>)> = None;
        let mut live: Option<(Network, Option<Network>)> = None;
        if need_teacher {
            match (&c.dump_path, c.teacher_from_dump) {
                (Some(path), true) => {
                    let dump = read_dump(require(path)?)?;
                    let logits = dump.logits.as_ref().filter(|_| need_head).map(|l| l.cast());
                    dumped = Some((dump.features.cast(), logits));
                }
                _ => {
                    let backbone = self.load_net("teacher_backbone", &self.teacher_backbone_spec()?)?;
                    let head = if need_head {
                        Some(self.load_net("teacher_head", &self.teacher_head_spec()?)?)
                    } else {
                        None
                    };
                    live = Some((backbone, head));
                }
            }
        }
        let teacher = match (&dumped, &live) {
            (Some((features, logits)), _) => Some(TeacherSource::Dump {
                features,
                logits: logits.as_ref(),
            }),
            (_, Some((backbone, head))) => Some(TeacherSource::Live {
                backbone,
                head: head.as_ref(),
            }),
            _ => None,
        };

        let spec = c.student.classifier(self.dim(), self.k())?;
        let out = distill(
            teacher,
            &spec,
            &c.distill,
            &weights,
            &transfer,
            Some(&test),
            &c.train_config(c.epochs),
        )?;
        self.save_classifier("student_distill", &out.model)?;
        self.write_metrics(&out.metrics)?;
        self.charge(&[(Phase::Distill, out.seconds)])?;
        self.report("student distill", &out, &test)
    }

    fn bench(&self) -> CliResult<()> {
        let report = desk_benchmark(&self.cfg.bench)?;
        write(&self.dir.join("bench.csv"), report.to_csv())?;
        write(&self.dir.join("bench.txt"), report.to_text())?;
        write(&self.dir.join("ledger.txt"), report.ledger.to_text())?;
        print!("{}", report.to_text());
        Ok(())
    }

    fn verify(&self) -> CliResult<()> {
        let mut lines = Vec::new();
        let mut failed = Vec::new();

        for chk in analytic_checks()? {
            let ok = chk.error() <= 1e-9;
            lines.push(format!(
                "analytic {:<28} got {:+.12} want {:+.12} {}",
                chk.name,
                chk.got,
                chk.want,
                verdict(ok)
            ));
            if !ok {
                failed.push(chk.name.to_string());
            }
        }

        let grads = gradient_suite()?;
        for op in &grads.ops {
            lines.push(format!(
                "gradient {:<16} configs {:>3} worst rel err {:.3e} {}",
                op.op,
                op.configs,
                op.worst_rel_err,
                verdict(op.passed())
            ));
            if let Some(f) = op.failures.first() {
                lines.push(format!(
                    "  first failure {} tensor {} coord {:?}: analytic {} numeric {}",
                    f.config, f.tensor, f.coord, f.analytic, f.numeric
                ));
                failed.push(format!("gradient {}", op.op));
            }
        }

        let sampler = CorrelatedSphere { dim: 16, noise: 0.5 };
        let opts = SweepOptions {
            seed: self.cfg.seed,
            ..SweepOptions::default()
        };
        let sweeps = infonce_limit_sweep(&sampler, &[self.cfg.nce_temperature], &LIMIT_M_LIST, LIMIT_ORACLE_M, &opts)?;
        for r in &sweeps {
            let ok = r.final_deviation <= 0.05 && r.max_increase <= 0.02;
            lines.push(format!(
                "limit tau {} oracle {:.6} final deviation {:.3e} max increase {:.3e} {}",
                r.tau,
                r.oracle,
                r.final_deviation,
                r.max_increase,
                verdict(ok)
            ));
            if !ok {
                failed.push(format!("limit tau {}", r.tau));
            }
        }

        for b in [2, 3, 4] {
            let r = uniformity_optimize_oracle(
                b,
                &UniformityOptions {
                    seed: self.cfg.seed,
                    ..UniformityOptions::default()
                },
            )?;
            let ok = r.converged && r.max_gap_rel_err <= 0.05 && (b != 2 || (r.loss + 8.0).abs() <= 1e-6);
            lines.push(format!(
                "uniformity B={b} loss {:.9} max gap rel err {:.3e} steps {} {}",
                r.loss,
                r.max_gap_rel_err,
                r.steps,
                verdict(ok)
            ));
            if !ok {
                failed.push(format!("uniformity B={b}"));
            }
        }

        let mut text = lines.join("\n");
        text.push('\n');
        write(&self.dir.join("report.txt"), &text)?;
        print!("{text}");
        if failed.is_empty() {
            Ok(())
        } else {
            Err(CliError::Verify(format!("failed: {}", failed.join(", "))))
        }
    }
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}
