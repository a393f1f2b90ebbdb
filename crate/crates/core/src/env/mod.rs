//! Surrogate in-hand reorientation environment.
//!
//! An abstract 11-joint hand rotates a rigid object through a shape-dependent
//! linear coupling between joint velocities and object angular velocity. Some
//! object categories have a joint-space jam region where rotation locks and the
//! grasp degrades. Success means holding the goal orientation, at rest, for a
//! window of consecutive control steps.

mod batch;
mod dynamics;
mod objects;
mod quat;
mod trajlog;

pub use batch::{batch_step, Env, EnvSnapshot, Observation, WorkerPool};
pub use dynamics::{
    advance_hold, check_success, compute_reward, env_reset, env_step, EnvParams, EnvState, RewardCoeffs, RewardProfile,
    RewardTerms, StepResult, SuccessCheck, SuccessThresholds, reached_now,
};
pub use objects::{
    category_name, generate_objects, generate_objects_with, read_object_file, split_objects, write_object_file,
    CategoryFlags, JamRegion, ObjectSpec, Split, TRAIN_COUNT,
};
pub use quat::{quat_angle, sample_uniform_so3, Quat};
pub use trajlog::{read_trajectory_log, recount, write_trajectory_log, LoggedStep, TrajectoryLog};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("quaternion norm {0} is not within 1e-6 of 1")]
    NonUnitQuaternion(f64),
    #[error("non-finite action")]
    NonFiniteAction,
    #[error("action has {0} entries, expected 11")]
    ActionLength(usize),
    #[error("object count must be at least 1")]
    EmptyObjectSet,
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error("policy failed: {0}")]
    Policy(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
