//! Self-supervised network intrusion detection from NetFlow data.

pub mod ablate;
pub mod autograd;
pub mod config;
pub mod detect;
pub mod error;
pub mod gnn;
pub mod graph;
pub mod ingest;
pub mod mae;
pub mod nn;
pub mod synth;
pub mod train;

pub use config::TrainConfig;
pub use detect::{EvalReport, ScoredFlows};
pub use error::Error;
pub use graph::{EdgeBatch, FlowGraph};
pub use ingest::{DatasetSplit, FeatureScaler, FlowRecord};
pub use train::{Checkpoint, Model, PreparedData, TrainOutcome, Variant};

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
