//! Cross-illuminant texture classification at desk scale: patch pipeline,
//! descriptor training, 1-NN evaluation and report emission.

pub mod config;
mod error;
pub mod experiment;
mod knn;
pub mod manifest;
pub mod report;

pub use config::{AugmentPlan, DescriptorId, ExperimentConfig, ModelShape, Thresholds};
pub use error::{Error, Result};
pub use experiment::{prepare_data, run_experiment, run_seeds, PreparedData};
pub use knn::{knn_classify, nearest_indices};
pub use manifest::{DatasetManifest, PatchEntry, PatchManifest, SceneEntry};
pub use report::{emit_report, median_accuracy, read_reports, EvalReport, ReportFormat};
