use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    TeacherPretrain,
    TeacherFinetune,
    Generation,
    Distill,
    StudentPretrain,
    StudentProbe,
    Scratch,
}

impl Phase {
    pub const ALL: [Phase; 7] = [
        Phase::TeacherPretrain,
        Phase::TeacherFinetune,
        Phase::Generation,
        Phase::Distill,
        Phase::StudentPretrain,
        Phase::StudentProbe,
        Phase::Scratch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Phase::TeacherPretrain => "teacher_pretrain",
            Phase::TeacherFinetune => "teacher_finetune",
            Phase::Generation => "generation",
            Phase::Distill => "distill",
            Phase::StudentPretrain => "student_pretrain",
            Phase::StudentProbe => "student_probe",
            Phase::Scratch => "scratch",
        }
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Phase::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown phase `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportMode {
    AuNx,
    PretrainLp,
    Scratch,
}

impl ReportMode {
    pub const ALL: [ReportMode; 3] = [ReportMode::AuNx, ReportMode::PretrainLp, ReportMode::Scratch];

    pub fn name(self) -> &'static str {
        match self {
            ReportMode::AuNx => "au_nx",
            ReportMode::PretrainLp => "pretrain_lp",
            ReportMode::Scratch => "scratch",
        }
    }

    /// Phases summed by this mode. Teacher pretraining never appears.
    pub fn phases(self) -> &'static [Phase] {
        match self {
            ReportMode::AuNx => &[Phase::TeacherFinetune, Phase::Generation, Phase::Distill],
            ReportMode::PretrainLp => &[Phase::StudentPretrain, Phase::StudentProbe],
            ReportMode::Scratch => &[Phase::Scratch],
        }
    }
}

/// Seconds spent per training phase. Recording a phase twice accumulates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CostLedger {
    phases: BTreeMap<Phase, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LedgerReport {
    pub mode: ReportMode,
    pub total: f64,
    pub breakdown: Vec<(Phase, f64)>,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, phase: Phase, seconds: f64) -> Result<()> {
        if !(seconds >= 0.0 && seconds.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "phase {} given {seconds} seconds",
                phase.name()
            )));
        }
        *self.phases.entry(phase).or_insert(0.0) += seconds;
        Ok(())
    }

    /// Overwrites a phase; used when a command is rerun into the same ledger.
    pub fn set(&mut self, phase: Phase, seconds: f64) -> Result<()> {
        self.phases.remove(&phase);
        self.record(phase, seconds)
    }

    pub fn get(&self, phase: Phase) -> Option<f64> {
        self.phases.get(&phase).copied()
    }

    pub fn phases(&self) -> impl Iterator<Item = (Phase, f64)> + '_ {
        self.phases.iter().map(|(&p, &s)| (p, s))
    }

    pub fn merge(&mut self, other: &CostLedger) {
        for (p, s) in other.phases() {
            *self.phases.entry(p).or_insert(0.0) += s;
        }
    }

    /// Structured-text form: a `[phases]` table and a `[totals]` table
    /// holding every mode whose phases are all recorded.
    pub fn to_text(&self) -> String {
        let mut out = String::from("[phases]\n");
        for (p, s) in self.phases() {
            writeln!(out, "{} = {s:?}", p.name()).expect("string write");
        }
        out.push_str("\n[totals]\n");
        for mode in ReportMode::ALL {
            if let Ok(r) = ledger_report(self, mode) {
                writeln!(out, "{} = {:?}", mode.name(), r.total).expect("string write");
            }
        }
        out
    }

    /// Reads the `[phases]` table back; `[totals]` is derived and ignored.
    pub fn from_text(text: &str) -> Result<Self> {
        #[derive(Deserialize, Serialize)]
        struct Doc {
            #[serde(default)]
            phases: BTreeMap<String, f64>,
            #[serde(default)]
            #[allow(dead_code)]
            totals: BTreeMap<String, f64>,
        }
        let doc: Doc = toml::from_str(text).map_err(|e| Error::Config {
            key: "ledger".into(),
            message: e.message().to_string(),
        })?;
        let mut ledger = CostLedger::new();
        for (name, s) in doc.phases {
            ledger.record(name.parse()?, s)?;
        }
        Ok(ledger)
    }
}

pub fn ledger_report(ledger: &CostLedger, mode: ReportMode) -> Result<LedgerReport> {
    let mut breakdown = Vec::new();
    let mut total = 0.0;
    for &p in mode.phases() {
        let s = ledger.get(p).ok_or(Error::MissingPhase(p.name()))?;
        total += s;
        breakdown.push((p, s));
    }
    Ok(LedgerReport {
        mode,
        total,
        breakdown,
    })
}

/// Nominal throughput used to turn counted multiply-accumulates into seconds.
pub const NOMINAL_MACS_PER_SECOND: f64 = 1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    /// Seconds derived from multiply-accumulate counts. Reproducible.
    #[default]
    Counted,
    /// Monotonic wall clock.
    Wall,
}

/// Accumulates the cost of timed sections under either clock.
#[derive(Debug, Clone)]
pub struct Stopwatch {
    mode: ClockMode,
    seconds: f64,
}

impl Stopwatch {
    pub fn new(mode: ClockMode) -> Self {
        Self { mode, seconds: 0.0 }
    }

    pub fn mode(&self) -> ClockMode {
        self.mode
    }

    pub fn seconds(&self) -> f64 {
        self.seconds
    }

    /// Runs `f`, charging `macs` under the counted clock or the elapsed
    /// time under the wall clock.
    pub fn time<R>(&mut self, macs: u64, f: impl FnOnce() -> R) -> R {
        match self.mode {
            ClockMode::Counted => {
                self.seconds += macs as f64 / NOMINAL_MACS_PER_SECOND;
                f()
            }
            ClockMode::Wall => {
                let start = Instant::now();
                let r = f();
                self.seconds += start.elapsed().as_secs_f64();
                r
            }
        }
    }
}
