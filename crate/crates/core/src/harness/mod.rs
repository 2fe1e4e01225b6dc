//! Dataset ingestion, experiment orchestration and metric reporting.

mod dataset;
mod eval;
pub mod report;
pub mod synth;

pub use dataset::{load_dataset, Dataset};
pub use eval::{
    attack_order, derive_seed, run_evaluation, CalibrationSummary, DetectabilityComparison, EvalReport, ExperimentConfig, FgsmConfig,
    ModelInfo, CONFIG_VERSION, REPORT_VERSION,
};
pub use report::{compute_metrics, read_rows_csv, render_metrics, write_rows_csv, ImageRow, MethodRow, Metrics, RowSchema, RowStatus};
pub use synth::{generate_synthetic, synthetic_image, SynthConfig, CLASS_NAMES};
