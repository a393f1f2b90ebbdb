//! Mixture-of-experts policies for in-hand object reorientation: networks,
//! environment, PPO, the three-stage training pipeline and evaluation.
pub mod env;
pub mod eval;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod policy;
pub mod ppo;
pub mod seed;
