//! Training, model selection, identifiability diagnostics and experiment orchestration.

mod diagnostics;
mod experiment;
mod methods;
mod select;
mod train;

pub use diagnostics::{affine_fit, identifiability_report, AffineFit, IdentifiabilityReport, R2};
pub use experiment::{
    content_hash, experiment_tasks, results_csv, run_experiment, run_task, summarize, summary_csv, ExperimentManifest,
    ExperimentName, ExperimentOutput, ExperimentTask, Failure, ResultRow, ScaleParams, SelectedConfig, SummaryRow,
    TaskOutcome, DESK_LAMBDA, MAX_FAILED_SEED_FRACTION, MIXING_SEED, RESULT_COLUMNS,
};
pub use methods::{estimate, estimate_with, EstimateOptions, Latents, Method};
pub use select::{cross_validate, CvOutcome, CvRun, Lambda2Subset, LambdaGrid, Selection};
pub use train::{
    evaluate_objective, rescore, train, train_observed, EpochLosses, Standardizer, TrainConfig, TrainOutput,
};
