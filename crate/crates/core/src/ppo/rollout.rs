use std::collections::BTreeSet;
use std::sync::Arc;

use super::PpoError;
use crate::env::{batch_step, Env, EnvError, ObjectSpec, WorkerPool};
use crate::policy::{sample_action, PolicyEnsemble, PolicyMode};

/// One environment step as seen by the learner.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub obs: Vec<f64>,
    pub e_phys: Vec<f64>,
    /// Index into the batch's object pool.
    pub object_idx: usize,
    pub category: usize,
    pub e_shape: Vec<f64>,
    pub z: Vec<f64>,
    /// Unclamped Gaussian draw; its log-density is `log_prob`.
    pub action: Vec<f64>,
    pub log_prob: f64,
    pub value: f64,
    /// Scaled reward.
    pub reward: f64,
    pub done: bool,
}

/// `horizon × n_envs` samples, time-major.
#[derive(Clone, Debug)]
pub struct RolloutBatch {
    pub horizon: usize,
    pub n_envs: usize,
    pub objects: Arc<Vec<ObjectSpec>>,
    pub samples: Vec<Sample>,
    /// `V(s_T)` per env.
    pub bootstrap: Vec<f64>,
    /// Success counts of episodes that ended during collection.
    pub finished_episodes: Vec<u32>,
    /// Mean unscaled reward per step.
    pub mean_reward: f64,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Distinct object categories present in the batch.
    pub fn categories(&self) -> BTreeSet<usize> {
        self.samples.iter().map(|s| s.category).collect()
    }
}

fn policy_err(e: impl std::fmt::Display) -> EnvError {
    EnvError::Policy(e.to_string())
}

/// Runs `horizon` stochastic steps in every env with a frozen snapshot of the
/// ensemble. All envs must share one object pool.
pub fn collect_rollout(
    ens: &PolicyEnsemble,
    mode: PolicyMode,
    envs: &mut [Env],
    pool: &WorkerPool,
    horizon: usize,
    reward_scale: f64,
) -> Result<RolloutBatch, PpoError> {
    let objects = envs.first().ok_or_else(|| PpoError::Shape("no environments".into()))?.objects.clone();
    if envs.iter().any(|e| !Arc::ptr_eq(&e.objects, &objects)) {
        return Err(PpoError::Shape("environments use different object pools".into()));
    }
    let finished_before: Vec<usize> = envs.iter().map(|e| e.finished.len()).collect();
    let mut samples = Vec::with_capacity(horizon * envs.len());
    let mut reward_sum = 0.0;
    for _ in 0..horizon {
        let results = batch_step(envs, pool, |o, rng| {
            let shape = ens.encode_shape(&o.object.pc_feature, o.object.category).map_err(policy_err)?;
            let z = ens.encode_privileged(&o.e_phys, &shape.e_shape).map_err(policy_err)?;
            let out = ens.policy_forward(&o.obs, &z, &shape.e_shape, mode).map_err(policy_err)?;
            let s = sample_action(&out.mean, &out.log_std, rng);
            let sample = Sample {
                obs: o.obs.clone(),
                e_phys: o.e_phys.clone(),
                object_idx: o.object_idx,
                category: o.object.category,
                e_shape: shape.e_shape,
                z,
                action: s.raw,
                log_prob: s.log_prob,
                value: out.value,
                reward: 0.0,
                done: false,
            };
            Ok((sample, s.clamped))
        });
        for r in results {
            let (mut sample, step) = r.map_err(|e| PpoError::Env(e.to_string()))?;
            reward_sum += step.reward.total;
            sample.reward = step.reward.total * reward_scale;
            sample.done = step.terminal;
            samples.push(sample);
        }
    }
    let bootstrap = envs
        .iter()
        .map(|env| {
            let o = env.observe();
            let shape = ens.encode_shape(&o.object.pc_feature, o.object.category)?;
            let z = ens.encode_privileged(&o.e_phys, &shape.e_shape)?;
            Ok(ens.policy_forward(&o.obs, &z, &shape.e_shape, mode)?.value)
        })
        .collect::<Result<Vec<f64>, crate::policy::PolicyError>>()?;
    let finished_episodes = envs
        .iter()
        .zip(finished_before)
        .flat_map(|(e, k)| e.finished[k..].iter().copied())
        .collect();
    let n = samples.len().max(1) as f64;
    Ok(RolloutBatch {
        horizon,
        n_envs: envs.len(),
        objects,
        samples,
        bootstrap,
        finished_episodes,
        mean_reward: reward_sum / n,
    })
}
