//! Three-stage training: joint base training, per-subset expert fine-tuning
//! with frozen encoders, then gate-only training of the mixture; plus the run
//! configuration and checkpoints.

mod checkpoint;
mod config;
mod state;
mod taxonomy;
mod train;

pub use checkpoint::{ArrayData, Checkpoint, CheckpointError, NamedArray, Stage, MAGIC, VERSION};
pub use config::{hex, provenance, Budget, Config, ConfigError};
pub use state::{component_name, load_ensemble, objects_hash, TrainState};
pub use taxonomy::{kmeans2, ExpertAssignment, Role, Taxonomy};
pub use train::{Pipeline, Slot, SlotAudit, SlotRun};

use std::path::PathBuf;

use thiserror::Error;

use crate::env::EnvError;
use crate::eval::EvalError;
use crate::policy::PolicyError;
use crate::ppo::PpoError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("taxonomy: {0}")]
    Taxonomy(String),
    #[error("training diverged in {slot} at update {update}; last good state {}", checkpoint.as_ref().map_or("not saved".into(), |p| p.display().to_string()))]
    Diverged { slot: String, update: u64, checkpoint: Option<PathBuf> },
    #[error("stage order: {0}")]
    StageOrder(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
