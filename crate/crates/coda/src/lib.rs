//! Desk-scale implementation of cascaded head-colliding attention and its
//! ablation family (vanilla multi-head attention, realformer-style logit
//! residuals, head-colliding attention without cascading), together with a
//! tape-based reverse-mode autodiff core, a training harness, and
//! Jensen-Shannon head-diversity analysis tooling.

pub mod analysis;
pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod model;
pub mod runner;
pub mod tensor;
pub mod training;

mod error;

pub use error::{Error, Result};
