//! Intra-distillation laboratory.
//!
//! Multi-pass dropout training with a divergence penalty that pulls the K
//! pass outputs together, an adaptive schedule for the penalty strength, and
//! the parameter-sensitivity and pruning analyses used to study how evenly a
//! trained model spreads its contribution over parameters.

pub mod analysis;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiment;
pub mod model;
pub mod objective;
pub mod schedule;
pub mod sensitivity;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
