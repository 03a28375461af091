//! Configuration, checkpoints, metrics and the training pipeline.

pub mod checkpoint;
pub mod config;
pub mod gradcheck_suite;
pub mod metrics;
pub mod pipeline;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use metrics::{accuracy, confusion, Curve, MetricsReport, Scores};
