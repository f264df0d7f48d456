//! Separation quality, classification accuracy and timing reports.

pub mod bss;
pub mod report;

pub use bss::{bss_eval, bss_eval_with, ratio_db, BssScores, Decomposition, DB_CAP, DEFAULT_FILTER_LENGTH};
pub use report::{
    accuracy_table, argmax, classification_accuracy, classification_counts, per_scene_table, runtime_report,
    score_table, AccuracyMode, SceneScores, Table,
};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{0}")]
    Shape(String),
    #[error("{0} has zero energy")]
    ZeroEnergy(String),
    #[error("references {0} and {1} are nearly identical")]
    Degenerate(usize, usize),
    #[error("reference Gram matrix is singular")]
    Singular,
}
