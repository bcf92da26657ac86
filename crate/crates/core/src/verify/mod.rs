//! Oracles for the mathematical claims the engine relies on, and the
//! desk-scale benchmark.

mod analytic;
pub mod bench;
mod grad;
mod limit;
mod uniform;

pub use analytic::{analytic_checks, AnalyticCheck};
pub use grad::{gradient_suite, gradient_suite_with, GradFailure, GradSuiteOptions, GradSuiteReport, OpReport, GRAD_OPS};
pub use limit::{infonce_limit_sweep, CorrelatedSphere, Degenerate, EmbeddingSampler, LimitSweepResult, SweepOptions};
pub use uniform::{uniformity_optimize_oracle, UniformityOptions, UniformityResult};

pub const LIMIT_M_LIST: [usize; 5] = [16, 64, 256, 1024, 4096];
pub const LIMIT_ORACLE_M: usize = 65536;
