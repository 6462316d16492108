//! Dataset manifests, synthetic dataset rendering, evaluation runs and
//! report emission.

pub mod config;
pub mod eval;
pub mod import;
pub mod manifest;
pub mod report;

pub use config::{load_config, DatasetCounts, EvalConfig, RunConfig};
pub use eval::{
    run_dehaze_eval, run_detect_eval, standard_variants, training_samples, Condition, DehazeMethod, DehazeVariant,
    EvalContext,
};
pub use manifest::{load_manifest, materialize_dataset, DatasetManifest, ManifestRecord, Split};
pub use report::{emit_report, read_report, write_report, MetricReport, ReportFormat, ReportRow};
