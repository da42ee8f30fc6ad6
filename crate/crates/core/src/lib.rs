//! Desk-scale laboratory for studying how adversarial data-deletion requests
//! damage a classifier's predictive uncertainty while leaving its label
//! predictions intact.
//!
//! The crate covers the full pipeline: deterministic MLP training with exact
//! reverse-mode gradients, synthetic datasets, uncertainty estimators and
//! calibrators, split conformal prediction, a family of unlearning methods
//! (first/second order, unrolling, Fisher noise, synaptic dampening, sharded
//! retraining), gradient-aligned crafting of deletion masks, calibration
//! metrics, an asymptotic-overconfidence simulation, and an experiment
//! harness with a line-oriented config format and JSON reports.
//!
//! With the default `parallel` feature, batch work (per-sample gradients,
//! restarts, shards, Monte-Carlo trials) runs on rayon; every reduction folds
//! in a fixed order, so results are identical in sequential builds.

pub mod attack;
pub mod binio;
pub mod calibrate;
pub mod config;
pub mod conformal;
pub mod data;
pub mod error;
pub mod exec;
pub mod grad;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod sisa;
pub mod stats;
pub mod tensor;
pub mod theory;
pub mod train;
pub mod unlearn;
pub mod uq;

pub use error::{Error, Result};
