//! Training loop, checkpoints, ablations and reporting.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod gradsuite;
pub mod plot;
pub mod run;
pub mod train;

pub use ablation::{run_ablation, AblationReport};
pub use checkpoint::Checkpoint;
pub use config::ExperimentConfig;
pub use run::{train_to_dir, Manifest, RunSummary};
pub use train::{CurveRow, Prepared, TrainState, Trainer};
