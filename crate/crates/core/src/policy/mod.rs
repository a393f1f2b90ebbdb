//! The mixture-of-experts policy stack: point-cloud and privileged encoders,
//! base and expert policy heads, the gating network, routing, Gaussian action
//! sampling and EMA action smoothing.

mod ensemble;
mod gaussian;
mod routing;
mod smoothing;

pub use ensemble::{
    Architecture, Component, GradLayout, PolicyEnsemble, PolicyInput, PolicyMode, PolicyNet,
    PolicyOutput, ShapeDescriptor, TensorId, Trace,
};
pub use gaussian::{entropy, log_prob, log_prob_grad, sample_action, SampledAction};
pub use routing::{aggregate, argmax, route, route_backward, top_k_indices, GateView, RouterMode};
pub use smoothing::SmootherState;

use thiserror::Error;

use crate::nn::NnError;

/// Fixed tensor widths of the policy interface.
pub mod dims {
    pub const NUM_JOINTS: usize = 11;
    /// `[q_{t-2}, q_{t-1}, q_t, a_{t-3}, a_{t-2}, a_{t-1}]`
    pub const OBS_DIM: usize = 6 * NUM_JOINTS;
    pub const PC_FEATURE_DIM: usize = 100;
    pub const PC_EMBED_DIM: usize = 32;
    pub const NUM_CATEGORIES: usize = 6;
    pub const SHAPE_DIM: usize = PC_EMBED_DIM + NUM_CATEGORIES;
    /// `[m, c(3), f, s, x(3), q(4), v(3), ω(3)]`
    pub const PHYS_DIM: usize = 19;
    pub const PHYS_DIM_PADDED: usize = 23;
    pub const Z_DIM: usize = 66;
    pub const POLICY_INPUT_DIM: usize = OBS_DIM + Z_DIM;
    /// Action mean plus one value output.
    pub const POLICY_OUTPUT_DIM: usize = NUM_JOINTS + 1;
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("{what}: expected length {expected}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
    #[error("category {0} out of range 0..6")]
    CategoryOutOfRange(usize),
    #[error("routing weights not normalized (sum {0})")]
    NotNormalized(f64),
    #[error("routing: {0}")]
    Routing(String),
    #[error("expert {0} does not exist")]
    UnknownExpert(usize),
    #[error("component {0:?} is frozen")]
    Frozen(Component),
    #[error(transparent)]
    Nn(#[from] NnError),
}
