//! Deliberately naive reference computations for checking the training engine.
//!
//! Nothing here depends on the engine: inputs and outputs are plain slices and
//! closures, and every routine refuses problem sizes it cannot handle quickly.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod arithmetic;
mod fd;
mod freelb;
mod grid;
mod report;

pub use arithmetic::{project_oracle, scaling_index_oracle, token_step_oracle};
pub use fd::finite_difference_gradient;
pub use freelb::{reference_freelb_step, FreeLbOutcome, FreeLbSetup};
pub use grid::{grid_inner_max, GridMax, MAX_GRID_DIMS, MAX_GRID_POINTS};
pub use report::{OracleReport, Tolerance};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OracleError {
    #[error("loss is not finite at probe {probe} of coordinate {coordinate}")]
    NonFiniteLoss { coordinate: usize, probe: f64 },
    #[error("invalid oracle input: {0}")]
    InvalidInput(String),
    #[error("grid of {points} points exceeds the limit of {limit}")]
    GridTooLarge { points: f64, limit: f64 },
}

pub type Result<T> = std::result::Result<T, OracleError>;
