//! Training diagnostics for mini-batch SGD.
//!
//! Trains small ReLU classifiers while sampling per-sample gradient Jacobians,
//! reducing each to its `|B| × |B|` Gram matrix, and tracking two cumulative
//! spectral measures per epoch: the running mean `C̄_K` of the truncated
//! condition number and the learning-rate-weighted energy sum `L_K`.
//! Fixed, dynamic and multi-step dynamic batch-size schedules are provided
//! for comparison runs.

pub mod data;
pub mod error;
pub mod fisher;
pub mod linalg;
pub mod model;
#[cfg(feature = "oracle")]
pub mod oracle;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
