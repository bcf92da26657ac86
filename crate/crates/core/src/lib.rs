//! Contrastive knowledge distillation engine.
//!
//! The numeric core (`numerics`, `losses`, `models`) is generic over
//! [`Scalar`]; the training harness and verification oracles run in `f64`
//! through the aliases below.

// `!(x > 0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod models;
pub mod numerics;
pub mod scalar;
pub mod trainer;
pub mod verify;

pub use error::{Error, FormatError, Result};
pub use scalar::Scalar;

pub type Matrix = numerics::Matrix<f64>;
pub type MatrixF32 = numerics::Matrix<f32>;
pub type LossResult = losses::LossResult<f64>;
pub type ModelParams = models::ModelParams<f64>;
