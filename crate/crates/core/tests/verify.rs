use aukd_core::verify::{
    gradient_suite, gradient_suite_with, infonce_limit_sweep, uniformity_optimize_oracle, CorrelatedSphere, Degenerate,
    GradSuiteOptions, SweepOptions, UniformityOptions, GRAD_OPS, LIMIT_M_LIST, LIMIT_ORACLE_M,
};

#[test]
fn gradient_suite_passes_on_every_op() {
    let report = gradient_suite().unwrap();
    for op in &report.ops {
        eprintln!(
            "{:<16} configs {:>3} worst rel err {:.3e}",
            op.op, op.configs, op.worst_rel_err
        );
        assert!(op.configs >= 20);
        assert!(op.passed(), "{}: {:?}", op.op, op.failures.first());
    }
    assert_eq!(report.ops.len(), GRAD_OPS.len());
    eprintln!("suite runtime {:.2} s", report.seconds);
}

#[test]
fn corrupted_gradient_fails_exactly_that_op() {
    for op in ["unif_log", "srrl"] {
        let opts = GradSuiteOptions {
            corrupt: Some(op),
            repeats: 1,
            ..Default::default()
        };
        let report = gradient_suite_with(&opts).unwrap();
        assert_eq!(report.failed_ops(), vec![op]);
        let f = &report.ops.iter().find(|r| r.op == op).unwrap().failures[0];
        assert!(f.config.starts_with(op));
        assert!(f.rel_err > 1e-5);
    }
}

#[test]
fn limit_sweep_converges_to_oracle() {
    let sampler = CorrelatedSphere { dim: 16, noise: 0.5 };
    let start = std::time::Instant::now();
    let results = infonce_limit_sweep(&sampler, &[0.5, 0.2], &LIMIT_M_LIST, LIMIT_ORACLE_M, &SweepOptions::default()).unwrap();
    for r in &results {
        eprintln!("tau {}: {:?} oracle {:.5} dev {:?}", r.tau, r.points, r.oracle, r.deviations);
        assert!(r.final_deviation <= 0.05);
        assert!(r.max_increase <= 0.02);
    }
    eprintln!("sweep runtime {:.2} s", start.elapsed().as_secs_f64());
}

#[test]
fn limit_sweep_degenerate_is_flat() {
    let opts = SweepOptions {
        include_positive: false,
        ..Default::default()
    };
    let r = infonce_limit_sweep(&Degenerate { dim: 8 }, &[0.5], &LIMIT_M_LIST, LIMIT_ORACLE_M, &opts).unwrap();
    let first = r[0].points[0].1;
    assert!(r[0].points.iter().all(|&(_, v)| (v - first).abs() < 1e-12));
    assert!((r[0].oracle - first).abs() < 1e-12);
}

#[test]
fn uniformity_oracle_is_equiangular_for_several_seeds() {
    for seed in 0..5 {
        for b in [2, 3, 4] {
            let r = uniformity_optimize_oracle(
                b,
                &UniformityOptions {
                    seed,
                    ..Default::default()
                },
            )
            .unwrap();
            assert!(r.converged, "B={b} seed {seed}");
            assert!(r.max_gap_rel_err <= 0.05, "B={b} seed {seed}: {:?}", r.gaps);
            if b == 2 {
                assert!((r.loss + 8.0).abs() <= 1e-6);
            }
        }
    }
}
