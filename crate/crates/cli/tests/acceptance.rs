//! Acceptance suite. Runs every criterion in order, prints one
//! `PASS`/`FAIL` line each and exits nonzero if any failed.
//!
//! Criterion 6 re-runs the full default benchmark (a few minutes);
//! thresholds come from `golden/bench_margins.toml`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use aukd_core::data::{TeacherDump, DUMP_MAGIC};
use aukd_core::trainer::{ledger_report, CostLedger, Phase, ReportMode};
use aukd_core::verify::{
    analytic_checks, gradient_suite, infonce_limit_sweep, uniformity_optimize_oracle, CorrelatedSphere, SweepOptions,
    UniformityOptions, GRAD_OPS, LIMIT_M_LIST, LIMIT_ORACLE_M,
};
use aukd_core::{FormatError, MatrixF32};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-5;
const MIN_CONFIGS: usize = 20;
const ANALYTIC_TOL: f64 = 1e-9;
const LIMIT_TOL: f64 = 0.05;
const LIMIT_NOISE: f64 = 0.02;
const GAP_TOL: f64 = 0.05;
const TWO_POINT_TOL: f64 = 1e-6;
const ORACLE_RUNTIME: f64 = 60.0;
const ROUND_TRIPS: usize = 100;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn aukd(out: &Path, args: &[&str]) -> std::process::Output {
    let o = Command::new(env!("CARGO_BIN_EXE_aukd"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("spawn aukd");
    if !o.status.success() {
        eprintln!("aukd {args:?}: {}", String::from_utf8_lossy(&o.stderr).trim());
    }
    o
}

fn run_all(out: &Path, steps: &[&[&str]]) -> Result<(), String> {
    for args in steps {
        let o = aukd(out, args);
        if !o.status.success() {
            return Err(format!("aukd {args:?} exited {:?}", o.status.code()));
        }
    }
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

/// Small pipeline config shared by criteria 5, 7 and 8.
const PIPELINE_CONFIG: &str = r#"
epochs = 15
batch_size = 32
[task]
per_class = 20
test_per_class = 20
foundation_per_class = 40
[teacher]
hidden = [48]
feat_dim = 24
pretrain_epochs = 8
probe_epochs = 10
[student]
hidden = [24]
feat_dim = 12
pretrain_epochs = 8
probe_epochs = 10
[distill]
projection_dim = 12
"#;

const TINY_BENCH_CONFIG: &str = r#"
[bench]
foundation_per_class = 30
task_classes = [0, 1, 2, 3]
abundant_per_class = 20
limited_per_class = 5
test_per_class = 20
seeds = [9, 10]
pretrain_epochs = 4
probe_epochs = 6
train_epochs = 6
batch_size = 16
[bench.world]
num_classes = 8
dim = 6
[bench.teacher]
hidden = [24]
feat_dim = 12
[bench.student]
hidden = [16]
feat_dim = 8
[bench.distill]
projection_dim = 8
"#;

fn gradient_criterion() -> Outcome {
    let t = Instant::now();
    let report = gradient_suite().map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let worst = report.ops.iter().map(|o| o.worst_rel_err).fold(0.0, f64::max);
    let few: Vec<_> = report.ops.iter().filter(|o| o.configs < MIN_CONFIGS).map(|o| o.op).collect();
    let detail = format!(
        "{} ops, worst rel err {worst:.2e} (tol {GRAD_TOL:e}), {secs:.1} s; failed {:?}, under {MIN_CONFIGS} configs {few:?}",
        report.ops.len(),
        report.failed_ops()
    );
    check(
        report.all_passed() && report.ops.len() == GRAD_OPS.len() && few.is_empty() && secs <= ORACLE_RUNTIME,
        detail,
    )
}

fn analytic_criterion() -> Outcome {
    let checks = analytic_checks().map_err(|e| e.to_string())?;
    let worst = checks.iter().map(|c| c.error()).fold(0.0, f64::max);
    let bad: Vec<_> = checks.iter().filter(|c| c.error() > ANALYTIC_TOL).map(|c| c.name).collect();
    check(
        bad.is_empty() && checks.len() == 7,
        format!("{} values, worst abs err {worst:.1e}; off {bad:?}", checks.len()),
    )
}

fn limit_criterion() -> Outcome {
    let t = Instant::now();
    let sampler = CorrelatedSphere { dim: 16, noise: 0.5 };
    let results = infonce_limit_sweep(&sampler, &[0.5, 0.2], &LIMIT_M_LIST, LIMIT_ORACLE_M, &SweepOptions::default())
        .map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let ok = results
        .iter()
        .all(|r| r.final_deviation <= LIMIT_TOL && r.max_increase <= LIMIT_NOISE);
    let parts: Vec<String> = results
        .iter()
        .map(|r| format!("tau {}: dev {:.2e}, rise {:.2e}", r.tau, r.final_deviation, r.max_increase))
        .collect();
    check(ok && secs <= ORACLE_RUNTIME, format!("{}; {secs:.1} s", parts.join("; ")))
}

fn uniformity_criterion() -> Outcome {
    let mut worst_gap: f64 = 0.0;
    let mut two_point = f64::NAN;
    let mut ok = true;
    for b in [2, 3, 4] {
        let r = uniformity_optimize_oracle(b, &UniformityOptions::default()).map_err(|e| e.to_string())?;
        worst_gap = worst_gap.max(r.max_gap_rel_err);
        ok &= r.converged && r.max_gap_rel_err <= GAP_TOL;
        if b == 2 {
            two_point = r.loss;
            ok &= (r.loss + 8.0).abs() <= TWO_POINT_TOL;
        }
    }
    check(ok, format!("worst gap rel err {worst_gap:.2e}, B=2 loss {two_point:.9}"))
}

fn reduction_criterion(root: &Path) -> Outcome {
    let out = root.join("reduction");
    std::fs::write(root.join("pipeline.toml"), PIPELINE_CONFIG).map_err(|e| e.to_string())?;
    let cfg = root.join("pipeline.toml");
    let cfg = cfg.to_str().unwrap();
    // no teacher checkpoint exists in this directory
    run_all(
        &out,
        &[
            &["gen-data", "-c", cfg],
            &["scratch", "-c", cfg],
            &["distill", "-c", cfg, "--set", "lambda2=0", "--set", "lambda3=0"],
        ],
    )?;
    let a = read(&out.join("scratch/metrics.csv"))?;
    let b = read(&out.join("distill/metrics.csv"))?;
    check(
        a == b && !a.is_empty(),
        format!("scratch {} bytes, distill {} bytes, identical {}", a.len(), b.len(), a == b),
    )
}

struct BenchRun {
    rows: BTreeMap<(String, String), (f64, f64, f64)>,
    csv: Vec<u8>,
    text: Vec<u8>,
    seconds: f64,
}

fn run_default_bench(root: &Path) -> Result<BenchRun, String> {
    let out = root.join("bench");
    let t = Instant::now();
    run_all(&out, &[&["bench"]])?;
    let seconds = t.elapsed().as_secs_f64();
    let csv = read(&out.join("bench/bench.csv"))?;
    let text = read(&out.join("bench/bench.txt"))?;
    let mut rows = BTreeMap::new();
    for line in String::from_utf8_lossy(&csv).lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let num = |i: usize| f[i].parse::<f64>().map_err(|e| format!("{line}: {e}"));
        rows.insert((f[0].to_string(), f[1].to_string()), (num(3)?, num(4)?, num(5)?));
    }
    Ok(BenchRun {
        rows,
        csv,
        text,
        seconds,
    })
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn bench_criterion(bench: &Result<BenchRun, String>) -> Outcome {
    let bench = bench.as_ref().map_err(Clone::clone)?;
    let margins: toml::Table = std::fs::read_to_string(golden_dir().join("bench_margins.toml"))
        .map_err(|e| e.to_string())?
        .parse()
        .map_err(|e: toml::de::Error| e.to_string())?;
    let th = margins["thresholds"].as_table().ok_or("no [thresholds]")?;
    let f = |k: &str| th[k].as_float().ok_or(format!("thresholds.{k}"));
    let band = th["slp_band"].as_array().ok_or("slp_band")?;
    let (lo, hi) = (band[0].as_float().unwrap(), band[1].as_float().unwrap());
    let mean = |regime: &str, method: &str| {
        bench
            .rows
            .get(&(regime.to_string(), method.to_string()))
            .map(|r| r.0)
            .ok_or(format!("no row {regime} {method}"))
    };

    let abundant = mean("abundant", "A/U(0x)")? - mean("abundant", "S-FR")?;
    let limited = mean("limited", "A/U(1x)")? - mean("limited", "A/U(0x)")?;
    let vs_slp = mean("limited", "A/U(1x)")? - mean("limited", "S-LP")?;
    let ok = abundant >= f("abundant_margin")?
        && limited >= f("limited_margin")?
        && (lo..=hi).contains(&vs_slp)
        && bench.seconds <= f("max_runtime_seconds")?
        && bench.rows.len() == 12;
    check(
        ok,
        format!(
            "abundant A/U(0x)-S-FR {abundant:+.4} (>= {}), limited A/U(1x)-A/U(0x) {limited:+.4} (>= {}), A/U(1x)-S-LP {vs_slp:+.4} in [{lo}, {hi}], {:.0} s",
            f("abundant_margin")?,
            f("limited_margin")?,
            bench.seconds
        ),
    )
}

fn ledger_criterion(root: &Path, bench: &Result<BenchRun, String>) -> Outcome {
    let out = root.join("ledger");
    let cfg = root.join("pipeline.toml");
    let cfg = cfg.to_str().unwrap();
    let mut steps: Vec<Vec<&str>> = [
        "gen-data",
        "pretrain-teacher",
        "probe-teacher",
        "distill",
        "pretrain-probe-student",
        "scratch",
    ]
    .iter()
    .map(|c| vec![*c, "-c", cfg])
    .collect();
    steps[0].extend(["--n-synthetic", "1"]);
    steps[3].extend(["--n-synthetic", "1"]);
    let steps: Vec<&[&str]> = steps.iter().map(Vec::as_slice).collect();
    run_all(&out, &steps)?;
    let text = String::from_utf8(read(&out.join("ledger.txt"))?).map_err(|e| e.to_string())?;
    let ledger = CostLedger::from_text(&text).map_err(|e| e.to_string())?;
    let au = ledger_report(&ledger, ReportMode::AuNx).map_err(|e| e.to_string())?;
    let phases: Vec<Phase> = au.breakdown.iter().map(|p| p.0).collect();
    let want = [Phase::TeacherFinetune, Phase::Generation, Phase::Distill];
    let sum: f64 = want.iter().map(|&p| ledger.get(p).unwrap_or(f64::NAN)).sum();
    let pretrain = ledger.get(Phase::TeacherPretrain).unwrap_or(0.0);
    let inclusion = phases == want && (au.total - sum).abs() <= 1e-12 * sum.max(1.0) && pretrain > 0.0;

    let bench = bench.as_ref().map_err(Clone::clone)?;
    let mut parts = vec![format!(
        "au_nx = {} = {:.4} s, teacher_pretrain {:.4} s excluded",
        phases.iter().map(|p| p.name()).collect::<Vec<_>>().join(" + "),
        au.total,
        pretrain
    )];
    let mut cheaper = true;
    for regime in ["abundant", "limited"] {
        let au0 = bench.rows[&(regime.to_string(), "A/U(0x)".to_string())].2;
        let slp = bench.rows[&(regime.to_string(), "S-LP".to_string())].2;
        cheaper &= au0 < slp;
        parts.push(format!("{regime} A/U(0x) {au0:.4} s < pretrain_lp {slp:.4} s"));
    }
    check(inclusion && cheaper, parts.join("; "))
}

fn artifacts(dir: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| e.to_string())? {
            let path = entry.map_err(|e| e.to_string())?.path();
            if path.is_dir() {
                stack.push(path);
            } else if matches!(
                path.file_name().and_then(|n| n.to_str()),
                Some("metrics.csv" | "bench.csv" | "ledger.txt")
            ) {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), read(&path)?);
            }
        }
    }
    Ok(out)
}

fn determinism_criterion(root: &Path, bench: &Result<BenchRun, String>) -> Outcome {
    let cfg = root.join("pipeline.toml");
    std::fs::write(root.join("tiny_bench.toml"), TINY_BENCH_CONFIG).map_err(|e| e.to_string())?;
    let tiny = root.join("tiny_bench.toml");
    let (cfg, tiny) = (cfg.to_str().unwrap(), tiny.to_str().unwrap());
    let steps: Vec<Vec<&str>> = [
        "gen-data",
        "pretrain-teacher",
        "probe-teacher",
        "scratch",
        "pretrain-probe-student",
        "distill",
    ]
    .iter()
    .map(|c| vec![*c, "-c", cfg])
    .chain([vec!["bench", "-c", tiny]])
    .collect();
    let steps: Vec<&[&str]> = steps.iter().map(Vec::as_slice).collect();
    let (a, b) = (root.join("rerun_a"), root.join("rerun_b"));
    run_all(&a, &steps)?;
    run_all(&b, &steps)?;
    let (fa, fb) = (artifacts(&a)?, artifacts(&b)?);
    let differing: Vec<_> = fa
        .keys()
        .chain(fb.keys())
        .filter(|k| fa.get(*k) != fb.get(*k))
        .map(|k| k.display().to_string())
        .collect();

    let bench = bench.as_ref().map_err(Clone::clone)?;
    let golden_csv = read(&golden_dir().join("bench.csv"))?;
    let golden_txt = read(&golden_dir().join("bench.txt"))?;
    let golden = bench.csv == golden_csv && bench.text == golden_txt;
    check(
        differing.is_empty() && fa.len() == 8 && golden,
        format!(
            "{} artifacts compared across two runs, differing {differing:?}; default bench matches golden table {golden}",
            fa.len()
        ),
    )
}

fn random_dump(rng: &mut ChaCha8Rng) -> TeacherDump {
    let n = rng.random_range(0..40);
    let dim = rng.random_range(1..24);
    let classes = if rng.random_bool(0.5) { rng.random_range(1..12) } else { 0 };
    // raw bit patterns cover subnormals, signed zeros and extremes
    let value = |rng: &mut ChaCha8Rng| loop {
        let v = if rng.random_bool(0.3) {
            f32::from_bits(rng.random())
        } else {
            rng.random_range(-1e3f32..1e3)
        };
        if v.is_finite() {
            return v;
        }
    };
    let features = MatrixF32::from_fn(n, dim, |_, _| value(rng));
    let logits = (classes > 0).then(|| MatrixF32::from_fn(n, classes, |_, _| value(rng)));
    // dataset files carry no logits, so their labels are unbounded
    let label_hi = if classes > 0 { classes as u32 } else { 50 };
    let labels = rng
        .random_bool(0.7)
        .then(|| (0..n).map(|_| rng.random_range(0..label_hi)).collect());
    TeacherDump {
        features,
        logits,
        labels,
    }
}

fn bits(m: &MatrixF32) -> Vec<u32> {
    m.as_slice().iter().map(|v| v.to_bits()).collect()
}

fn wire_criterion(root: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut exact = 0;
    for i in 0..ROUND_TRIPS {
        let d = random_dump(&mut rng);
        let path = root.join(format!("rt_{i}.kdxd"));
        aukd_core::data::write_dump(&d, &path).map_err(|e| e.to_string())?;
        let bytes = read(&path)?;
        let back = aukd_core::data::read_dump(&path).map_err(|e| format!("case {i}: {e}"))?;
        let same = bits(&back.features) == bits(&d.features)
            && back.features.shape() == d.features.shape()
            && back.logits.as_ref().map(bits) == d.logits.as_ref().map(bits)
            && back.labels == d.labels
            && back.encode().map_err(|e| e.to_string())? == bytes;
        exact += same as usize;
    }

    let base = TeacherDump {
        features: MatrixF32::from_fn(3, 2, |i, j| (i * 2 + j) as f32 - 2.5),
        logits: Some(MatrixF32::from_fn(3, 4, |i, j| (i + j) as f32)),
        labels: Some(vec![0, 3, 1]),
    }
    .encode()
    .map_err(|e| e.to_string())?;
    let mut magic = base.clone();
    magic[..4].copy_from_slice(b"KDXE");
    let mut version = base.clone();
    version[4] = 2;
    let mut truncated = base.clone();
    truncated.pop();
    let mut long = base.clone();
    long.extend_from_slice(&[0; 4]);
    let mut label = base.clone();
    let at = label.len() - 8;
    label[at..at + 4].copy_from_slice(&4u32.to_le_bytes());

    let classes = [
        ("magic", matches!(TeacherDump::decode(&magic), Err(FormatError::BadMagic { found, .. }) if found != DUMP_MAGIC)),
        (
            "version",
            matches!(TeacherDump::decode(&version), Err(FormatError::UnsupportedVersion { found: 2, .. })),
        ),
        (
            "length",
            matches!(TeacherDump::decode(&truncated), Err(FormatError::Truncated { .. }))
                && matches!(TeacherDump::decode(&long), Err(FormatError::TrailingBytes { extra: 4 })),
        ),
        (
            "label range",
            matches!(
                TeacherDump::decode(&label),
                Err(FormatError::LabelOutOfRange { row: 1, label: 4, num_classes: 4 })
            ),
        ),
    ];
    let rejected: Vec<_> = classes.iter().filter(|c| c.1).map(|c| c.0).collect();
    check(
        exact == ROUND_TRIPS && rejected.len() == 4 && TeacherDump::decode(&base).is_ok(),
        format!("{exact}/{ROUND_TRIPS} bit-exact round trips; rejected {rejected:?}"),
    )
}

fn main() {
    let root = tempfile::tempdir().expect("tempdir");
    let root = root.path();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |n, name, outcome: Outcome| {
        println!(
            "criterion {n} {name:<22} {}: {}",
            if outcome.is_ok() { "PASS" } else { "FAIL" },
            outcome.as_ref().unwrap_or_else(|e| e)
        );
        results.push((n, name, outcome));
    };

    record(1, "gradient suite", gradient_criterion());
    record(2, "analytic values", analytic_criterion());
    record(3, "infonce limit", limit_criterion());
    record(4, "uniformity minimizer", uniformity_criterion());
    record(5, "reduction", reduction_criterion(root));
    let bench = run_default_bench(root);
    record(6, "desk benchmark", bench_criterion(&bench));
    record(7, "cost ledger", ledger_criterion(root, &bench));
    record(8, "determinism", determinism_criterion(root, &bench));
    record(9, "wire format", wire_criterion(root));

    let failed: Vec<usize> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
