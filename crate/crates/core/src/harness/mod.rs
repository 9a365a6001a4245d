//! Experiment orchestration: configs, replicate runs, records, slopes.

pub mod config;
pub mod ingest;
pub mod records;
pub mod slope;
pub mod trial;

pub use config::{EstimatorKind, ExperimentConfig, Sweep, SweepAxis, SweepPoint, TruthValues};
pub use ingest::{ingest_csv, ingest_reader, CsvSchema};
pub use records::{read_records, write_records, RECORD_HEADER};
pub use slope::{fit_loglog_slope, mean_mse_by, SlopeAxis, SlopeFit};
pub use trial::{generate_true_model, min_separation, partition, run_sweep, run_trial, Status, TrialRecord};

#[cfg(test)]
mod tests;
