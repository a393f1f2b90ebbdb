//! Proximal policy optimization over any trainable subset of the ensemble.

mod gae;
mod loss;
mod rollout;
mod update;

pub use gae::{compute_gae, normalize_advantages};
pub use loss::{ppo_loss, LossGrad, LossTerms};
pub use rollout::{collect_rollout, RolloutBatch, Sample};
pub use update::{batch_targets, minibatch_gradient, ppo_update, UpdateStats};

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{Component, PolicyError};

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite probability ratio")]
    NonFiniteRatio,
    #[error("frozen component {0:?} changed during an update")]
    FreezeViolation(Component),
    #[error("environment: {0}")]
    Env(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub clip: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub lr: f64,
    pub kl_threshold: f64,
    pub lr_min: f64,
    pub lr_max: f64,
    pub minibatch_size: usize,
    pub epochs: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub horizon: usize,
    /// Multiplier applied to environment rewards before GAE.
    pub reward_scale: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            gamma: 0.99,
            lambda: 0.95,
            lr: 5e-3,
            kl_threshold: 0.02,
            lr_min: 1e-6,
            lr_max: 1e-2,
            minibatch_size: 256,
            epochs: 4,
            entropy_coef: 0.0,
            value_coef: 0.5,
            max_grad_norm: 1.0,
            horizon: 8,
            reward_scale: 0.01,
        }
    }
}

/// KL-driven step size: shrink by 2/3 above twice the threshold, grow by 3/2
/// below half of it, bounded to `[lr_min, lr_max]`.
pub fn adaptive_lr(lr: f64, approx_kl: f64, cfg: &PpoConfig) -> f64 {
    if approx_kl > 2.0 * cfg.kl_threshold {
        (lr * 2.0 / 3.0).max(cfg.lr_min)
    } else if approx_kl < 0.5 * cfg.kl_threshold {
        (lr * 1.5).min(cfg.lr_max)
    } else {
        lr
    }
}

/// Appends one row per update to a CSV file, writing the header first if the
/// file is new.
pub fn append_stats_csv(path: &Path, rows: &[UpdateStats]) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let exists = path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if !exists {
        writeln!(f, "update_index,mean_reward,mean_S,kl,lr,policy_loss,value_loss,total_loss,grad_norm")?;
    }
    for s in rows {
        let mean_s = s.mean_s.map_or(String::new(), |v| format!("{v}"));
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{}",
            s.update_index, s.mean_reward, mean_s, s.kl, s.lr, s.policy_loss, s.value_loss, s.total_loss, s.grad_norm
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_rule() {
        let cfg = PpoConfig::default();
        assert_eq!(adaptive_lr(5e-3, 0.02, &cfg), 5e-3);
        assert!((adaptive_lr(5e-3, 0.06, &cfg) - 5e-3 * 2.0 / 3.0).abs() < 1e-18);
        assert_eq!(adaptive_lr(5e-3, 0.001, &cfg), 7.5e-3);
        assert_eq!(adaptive_lr(9e-3, 0.0, &cfg), 1e-2);
        let mut lr = 5e-3;
        for _ in 0..100 {
            lr = adaptive_lr(lr, 1.0, &cfg);
        }
        assert_eq!(lr, 1e-6);
    }

    #[test]
    fn stats_csv_header_once() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("stats.csv");
        append_stats_csv(&p, &[UpdateStats::default()]).unwrap();
        append_stats_csv(&p, &[UpdateStats { update_index: 1, mean_s: Some(2.5), ..Default::default() }]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("update_index,mean_reward,mean_S,kl,lr"));
        assert!(lines[2].starts_with("1,0,2.5,"));
    }
}
