//! Controlling neural collapse in a small MLP: an entropy-regularized encoder
//! that resists collapse, a frozen simplex-ETF projector that enforces it, and
//! the measurement stack (NC1-NC4, effective rank, nearest-neighbor entropy,
//! energy-score OOD detection, FPR95, linear probes) used to compare the two.

// Negated float comparisons are used on purpose so that NaN fails checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod collapse;
pub mod datakit;
pub mod diffcore;
pub mod error;
pub mod etf;
pub mod netlib;
pub mod objective;
pub mod oodeval;
pub mod runner;

pub use error::{Error, Result};
