//! Learning an acceptability distribution from black-box perceptual ratings.
//!
//! The pipeline has four stages:
//!
//! 1. [`estimation`] samples periphery points around real data, issues
//!    antithetic perturbation pairs to an [`evaluators::Evaluator`], and turns
//!    the absolute ratings into value and gradient targets.
//! 2. [`score_net`] fits a two-headed network (value head and gradient head)
//!    to those targets.
//! 3. [`langevin`] samples from the learned distribution using the log-score
//!    `grad / value`.
//! 4. [`gan`] trains a generator baseline by gradient ascent on the same
//!    network, for the mode-collapse comparison.

pub mod config;
pub mod dataset;
pub mod error;
pub mod estimation;
pub mod evaluators;
pub mod gan;
pub mod jsonl;
pub mod kde;
pub mod langevin;
pub mod nn;
pub mod rng;
pub mod score_net;
pub mod stats;
pub mod types;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use rng::RngStream;
pub use types::{DataPoint, RealDataset};
