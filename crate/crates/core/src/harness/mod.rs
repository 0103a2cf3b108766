//! Experiment driver: configuration, dataset handling, and the runner
//! behind the CLI.

pub mod config;
pub mod data;
pub mod experiment;

pub use config::{ExperimentConfig, TransportKind};
pub use data::{load_or_generate_dataset, partition, Dataset, DatasetSplit};
pub use experiment::{
    run_experiment, render_summary, CompareSummary, ExperimentOutcome, ProtocolSummary,
};
