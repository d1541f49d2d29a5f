//! Metrics, grouped cross-validation and the benchmark report.

pub mod cv;
pub mod metrics;
pub mod report;
pub mod suite;

use std::path::PathBuf;

use thiserror::Error;

use crate::learners::{Family, LearnerError};

pub use cv::{balance_training, derive_seed, grid_search, stratified_kfold, Folds, GridCell, GridResult, Samples};
pub use metrics::{cap_at, cap_curve, roc_auc, roc_curve, CapCurve};
pub use report::write_report;
pub use suite::{evaluate_suite, evaluate_tables, EvalConfig, EvalReport, FoldResult, ModelDefaults, PaddingRow, SuiteCell, Summary};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("label {0} is not 0 or 1")]
    NonBinaryLabel(u8),
    #[error("scores contain NaN")]
    NanScore,
    #[error("AUC needs both labels present")]
    SingleLabel,
    #[error("CAP needs at least one positive")]
    NoPositives,
    #[error("{groups} patients cannot fill {k} folds")]
    TooFewGroups { groups: usize, k: usize },
    #[error("cannot balance: one label is absent from the training rows")]
    EmptyMinority,
    #[error("grid is empty")]
    EmptyGrid,
    #[error("bad grid: {0}")]
    BadGrid(String),
    #[error("invalid evaluation config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error("horizon {0} was not labeled by the phase engine")]
    MissingHorizon(i64),
    #[error("the recurrent model needs transaction sequences")]
    MissingSequences,
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error("{family} at {horizon} days: {source}")]
    Cell { family: Family, horizon: i64, source: Box<EvalError> },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}
