//! Dense networks with exact reverse-mode gradients, and the Adam optimizer.
//!
//! Everything is `f64`. Forward passes are pure functions of `(parameters, input)`;
//! backward passes consume the [`ForwardCache`] of a matching forward call.

mod adam;
mod dense;
mod ops;

pub use adam::{adam_step, AdamState};
pub use dense::{Activation, DenseNet, ForwardCache, Gradients, LayerShape};
pub use ops::{elu, softmax, softmax_backward};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("parameter shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("non-finite input")]
    NonFiniteInput,
    #[error("non-finite gradient; optimizer step skipped")]
    NonFiniteGradient,
    #[error("empty input")]
    EmptyInput,
    #[error("forward cache does not match the current network")]
    StaleCache,
    #[error("invalid layer configuration: {0}")]
    InvalidLayers(String),
}

/// Sums per-shard gradient buffers pairwise in a fixed tree order, so the result
/// depends only on the shard list, never on which thread produced which shard.
pub fn tree_reduce(mut shards: Vec<Vec<f64>>) -> Vec<f64> {
    if shards.is_empty() {
        return Vec::new();
    }
    while shards.len() > 1 {
        let mut next = Vec::with_capacity(shards.len().div_ceil(2));
        let mut it = shards.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += y;
                }
            }
            next.push(a);
        }
        shards = next;
    }
    shards.pop().unwrap()
}
