//! Desk-scale simulator of training-time attacks on neural networks.
//!
//! Honest per-sample gradients are combined by an aggregator (averaging or
//! MultiKrum) and applied by an optimizer (SGD or Adam). An attacker holding
//! an auxiliary dataset appends either crafted gradient vectors (gradient
//! ascent, orthogonal, little-is-enough) or data points obtained by
//! inverting those gradients under a feasibility constraint.

pub mod aggregators;
pub mod attacks;
pub mod autodiff;
pub mod datasets;
pub mod error;
pub mod gradient;
pub mod harness;
pub mod inversion;
pub mod models;
pub mod optimizers;
pub mod par;
pub mod tensor;

pub use error::{Error, Result};
