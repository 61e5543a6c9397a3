//! Simulator for federated unsupervised person re-identification.
//!
//! Edges train a small embedding network on unlabeled data using pseudo-labels
//! from bottom-up clustering; a cloud server aggregates the backbones and sends
//! back personalized models. Optional personalization knobs:
//!
//! * personalized epochs: early-stop local training once batch precision
//!   saturates (after a full-budget first round);
//! * personalized clustering: per-client merge schedule derived from a short
//!   profiling run;
//! * personalized update: EMA blend of local and global models, weighted by
//!   normalized per-layer distance.

pub mod cloud;
pub mod clustering;
pub mod data_io;
pub mod edge;
pub mod error;
pub mod eval;
pub mod nets;
pub mod params;
pub mod profiler;
pub mod seed;

pub use cloud::{
    run_experiment, run_experiment_with, run_standalone, ExperimentConfig, FederationOutcome, FederationState,
    RunOptions, TrainConfig,
};
pub use data_io::{ClientDataset, ExperimentReport, RoundMetrics, RunMode};
pub use error::{Error, Result};
pub use params::{Layer, ParamSet};
