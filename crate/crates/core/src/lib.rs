//! Model-based offline policy search with ensembles.
//!
//! Everything needed to learn a controller from a single fixed batch of
//! transitions, with no further environment interaction:
//!
//! - [`autodiff`] / [`nn`] / [`opt`]: a small dense-tensor reverse-mode
//!   differentiation engine, weight-normalized MLPs, and SGD/Adam.
//! - [`env`] / [`behavior`] / [`dataset`]: desk-scale point-mass control
//!   environments, behavior policies in three quality tiers, epsilon-greedy
//!   batch generation, and a behavior-cloning baseline.
//! - [`dynamics`]: ensembles of transition (and optional reward) models
//!   trained on normalized data with range-clipped predictions.
//! - [`vae`]: a variational autoencoder over state-action pairs whose
//!   reconstruction error scores how well a pair is supported by the batch.
//! - [`policy`]: deterministic policy optimization by backpropagation through
//!   imagined ensemble rollouts, with the support penalty folded into the loss.
//! - [`eval`] / [`grid`] / [`report`]: true-environment evaluation, robust
//!   10th-percentile summaries, Monte Carlo checks, and experiment grids.
//!
//! The `moose` binary exposes the pipeline as CLI subcommands; see the README.

pub mod autodiff;
pub mod behavior;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod dynamics;
pub mod env;
pub mod eval;
pub mod gradcheck;
pub mod grid;
pub mod nn;
pub mod opt;
pub mod policy;
pub mod report;
pub mod seeding;
pub mod vae;

use std::path::Path;

/// Errors shared across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A tensor or layer was fed data of the wrong shape.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: String,
        expected: String,
        got: String,
    },
    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),
    /// A parameter configuration with no valid interpretation (e.g. a zero
    /// direction row in a weight-normalized layer).
    #[error("degenerate parameter: {0}")]
    DegenerateParameter(String),
    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Diverged(String),
    /// An imagined rollout produced a non-finite state.
    #[error("rollout diverged at step {step} in model {model}")]
    RolloutDiverged { step: usize, model: usize },
    /// A file did not match its documented format.
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub(crate) fn format(path: &Path, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.display().to_string(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
