//! End-to-end runs: fit or load each configured model, evaluate it on every
//! manifest, and write one report per model.
//!
//! A run first loads every manifest and checks each requested task's data
//! prerequisites; nothing is computed until all checks pass (or, with
//! `allow_missing`, until the failing tasks are marked as skipped). Tasks
//! that read only raw embeddings (few-shot, zero-shot OSR, active learning)
//! are computed once per dataset and copied into every model's report.
//!
//! Record task names follow the reliability taxonomy used for scoring, see
//! [`Area::of_task`]: evaluation on test, covariate-shift and subpopulation
//! splits is recorded as `in_distribution`, `covariate_shift` and
//! `subpopulation` respectively.

mod config;
mod engine;
mod report;

pub use config::{
    default_rejection_rates, FewshotOptions, MetricOptions, ModelSpec, OsrScore, RunConfig, Task,
};
pub use engine::{run, run_active_learning, run_eval, run_fewshot, run_osr, run_zeroshot_osr, train_heads, write_reports};
pub use report::{
    fmt_float, round_sig9, run_score, score_json, Area, AreaScore, Curve, HeadInfo, Provenance, Report, ScoreSummary,
    Skip, DESCRIPTIVE, RECORDS_FILE, REPORT_FILE, SCORE_FILE, WITHIN_DATASET_FIRST,
};

use crate::active_learning::AlError;
use crate::heads::HeadError;
use crate::metrics::MetricError;
use crate::ood::OodError;
use crate::tensor_store::TensorError;

/// Flag on oracle-collaborative AUROC records, whose estimator is our own
/// reading of the referral mechanism.
pub const FLAG_OC_AUROC: &str = "interpretation:oc_auroc";
/// Flag on sequence OOD records: the score is the magnitude of the mean
/// per-step entropy.
pub const FLAG_SEQUENCE_ENTROPY: &str = "interpretation:sequence_entropy_magnitude";
/// Flag on relative Mahalanobis records fitted from a single class, where
/// the score is identically zero.
pub const FLAG_DEGENERATE: &str = "degenerate";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid run: {}", .0.join("; "))]
    Validation(Vec<String>),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Ood(#[from] OodError),
    #[error(transparent)]
    ActiveLearning(#[from] AlError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        PipelineError::Validation(vec![msg.into()])
    }

    /// 2 for validation failures, 1 for anything that failed while computing.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Validation(_) => 2,
            _ => 1,
        }
    }
}
