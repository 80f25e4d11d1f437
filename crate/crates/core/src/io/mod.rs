//! Files on disk: datasets, checkpoints, run configs and reports.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod report;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState};
pub use config::RunConfig;
pub use data::{load_dataset, write_predictions_csv, DatasetManifest};
pub use report::RunReport;
