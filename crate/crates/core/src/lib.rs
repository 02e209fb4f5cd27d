//! Single-source robustness for multi-source fusion models.
//!
//! The crate is organised bottom-up:
//!
//! - [`linear`]: the linear fusion data model, the minimax (MaxSSN) closed
//!   form, the all-source least-squares comparator and a numeric oracle.
//! - [`adversarial`]: the FGS / l1 counterpart of the linear analysis.
//! - [`diff`]: a small reverse-mode tensor core (dense, 1x1 conv, ReLU,
//!   losses, l1 penalty, Adam/SGD) used by the deep experiments.
//! - [`fusion`]: mean, concatenation and latent-ensemble fusion.
//! - [`corruption`], [`tasks`], [`metrics`]: corruption generators, synthetic
//!   multi-source tasks and robustness reports.
//! - [`training`]: clean, TrainASN, TrainSSN and TrainSSNAlt loops plus the
//!   fine-tuning variant.
//! - [`experiment`]: config-driven runs, verification suites and tables.

pub mod adversarial;
pub mod corruption;
pub mod diff;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod linear;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tasks;
pub mod training;

pub use error::{Error, Result};
