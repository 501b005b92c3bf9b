//! Token-aware virtual adversarial training on a small transformer encoder,
//! with PGD and FreeLB as configuration reductions.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod tensor;
pub mod train;
pub mod vat;
pub mod vocab;

pub use error::{Error, Result};
