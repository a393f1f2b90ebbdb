//! Evaluation: deterministic per-object success counts, order-statistic
//! summaries, report files, gate-weight export, a 2-D projection of gate
//! vectors and ablation sweeps.

mod ablation;
mod gates;
mod metrics;
mod run;

pub use ablation::{run_ablation, AblationPreset, AblationReport, AblationRow, Variant};
pub use gates::{export_gate_weights, project_2d, write_gate_csv, write_projection_csv, GateRow, GateTrace, Projection};
pub use metrics::{extreme_indices, mean_std, sorted, summarize, Summary};
pub use run::{
    evaluate_object, evaluate_objects, evaluate_objects_logged, mode_name, run_eval_suite, run_eval_suite_with, write_report,
    EvalReport, EvalSuite, ObjectEval,
};

use thiserror::Error;

use crate::env::{EnvError, Split};
use crate::policy::PolicyError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("summary needs at least 5 objects, got {0}")]
    TooFewObjects(usize),
    #[error("success counts must be finite")]
    NonFinite,
    #[error("at least one episode per object is required")]
    NoEpisodes,
    #[error("projection needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("vectors differ in length")]
    Ragged,
    #[error("split `{0}` contains no objects")]
    EmptySplit(Split),
    #[error("{0}")]
    Unsupported(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
