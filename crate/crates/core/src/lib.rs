//! One-shot distributed learning by KL-averaging.
//!
//! Local models are fitted on data shards and fused at a single center.
//! Besides parameter averaging and the plain bootstrap KL-averaging
//! estimator, the crate implements two variance-reduced variants: a
//! linear control-variate correction (`kl_control`) and an
//! importance-weighted M-estimator (`kl_weighted`).

pub mod dataset;
pub mod error;
pub mod estimators;
pub mod fit;
pub mod harness;
pub mod linalg;
pub mod matching;
pub mod model;
pub mod seed;

pub use nalgebra;

pub use dataset::Dataset;
pub use error::{Error, Result};
pub use model::{Density, Family, FlatParams, GmmParams, Layout, MixPpcaParams, Model, PpcaParams, ScoreEvaluator};
pub use estimators::{BootstrapSet, FisherMatrix, LocalEnsemble};
pub use fit::{FitConfig, FitReport, ModelSpec, WeightedDataset};
pub use harness::{EstimatorKind, ExperimentConfig, Status, TrialRecord};
pub use matching::Assignment;
