//! Optimization, metrics, fold training, cross-validation and ablations.

mod adam;
mod metrics;
mod runner;

pub use adam::{Adam, AdamConfig};
pub use metrics::{
    confusion_counts, f1_score, macro_f1, mean_std, per_class_f1, read_metrics, read_summary, write_records,
    write_summary, CsvError, EpochRecord, F1Average, Summary, TelemetryRecord, METRICS_HEADER,
};
pub use runner::{
    cross_validate, run_ablation, train_fold, write_run, AblationVariant, CvResult, FoldResult, ModelKind,
    TrainConfig, TrainError,
};
