use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::Serialize;

use super::gae::{compute_gae, normalize_advantages};
use super::loss::{ppo_loss, LossTerms};
use super::rollout::RolloutBatch;
use super::{adaptive_lr, PpoConfig, PpoError};
use crate::env::WorkerPool;
use crate::nn::{tree_reduce, AdamState};
use crate::policy::{PolicyError, entropy, log_prob, log_prob_grad, Component, GradLayout, PolicyEnsemble, PolicyInput, PolicyMode};
use crate::seed;

/// Samples per gradient shard. Shards are reduced in a fixed tree order, so the
/// result does not depend on the worker count.
const SHARD: usize = 32;

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct UpdateStats {
    pub update_index: u64,
    pub mean_reward: f64,
    /// Mean success count of episodes finished during the rollout.
    pub mean_s: Option<f64>,
    pub kl: f64,
    pub lr: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub total_loss: f64,
    pub grad_norm: f64,
    pub skipped_minibatches: usize,
}

/// Advantages (normalized) and returns for a batch.
pub fn batch_targets(batch: &RolloutBatch, cfg: &PpoConfig) -> Result<(Vec<f64>, Vec<f64>), PpoError> {
    let rewards: Vec<f64> = batch.samples.iter().map(|s| s.reward).collect();
    let values: Vec<f64> = batch.samples.iter().map(|s| s.value).collect();
    let dones: Vec<bool> = batch.samples.iter().map(|s| s.done).collect();
    let (mut adv, ret) = compute_gae(&rewards, &values, &dones, &batch.bootstrap, cfg.gamma, cfg.lambda)?;
    normalize_advantages(&mut adv);
    Ok((adv, ret))
}

/// Loss on the samples `idx` and its gradient with respect to every tensor in
/// `layout`. Encoders are re-run only when they are being trained.
#[allow(clippy::too_many_arguments)]
pub fn minibatch_gradient(
    ens: &PolicyEnsemble,
    batch: &RolloutBatch,
    idx: &[usize],
    advantages: &[f64],
    returns: &[f64],
    cfg: &PpoConfig,
    mode: PolicyMode,
    layout: &GradLayout,
    pool: &WorkerPool,
) -> Result<(LossTerms, Vec<f64>), PpoError> {
    let encoders_trained = layout.contains(Component::MuPc) || layout.contains(Component::MuE);
    let mut shards: Vec<&[usize]> = idx.chunks(SHARD).collect();
    let forwards = pool.map(&mut shards, |chunk| {
        chunk
            .iter()
            .map(|&i| {
                let s = &batch.samples[i];
                let obj = &batch.objects[s.object_idx];
                let input = PolicyInput { obs: &s.obs, e_phys: &s.e_phys, pc_feature: &obj.pc_feature, category: obj.category };
                let pre = (!encoders_trained).then(|| (s.e_shape.as_slice(), s.z.as_slice()));
                ens.forward_trace(&input, pre, mode)
            })
            .collect::<Result<Vec<_>, _>>()
    });
    let forwards: Vec<_> = forwards.into_iter().collect::<Result<Vec<_>, _>>()?.into_iter().flatten().collect();

    let old_lp: Vec<f64> = idx.iter().map(|&i| batch.samples[i].log_prob).collect();
    let new_lp: Vec<f64> =
        idx.iter().zip(&forwards).map(|(&i, (o, _))| log_prob(&o.mean, &o.log_std, &batch.samples[i].action)).collect();
    let adv: Vec<f64> = idx.iter().map(|&i| advantages[i]).collect();
    let old_v: Vec<f64> = idx.iter().map(|&i| batch.samples[i].value).collect();
    let new_v: Vec<f64> = forwards.iter().map(|(o, _)| o.value).collect();
    let ret: Vec<f64> = idx.iter().map(|&i| returns[i]).collect();
    let inv = 1.0 / idx.len() as f64;
    let ent = forwards.iter().map(|(o, _)| entropy(&o.log_std)).sum::<f64>() * inv;
    let lg = ppo_loss(&old_lp, &new_lp, &adv, &old_v, &new_v, &ret, ent, cfg)?;

    let mut jobs: Vec<(usize, usize)> = (0..idx.len()).step_by(SHARD).map(|a| (a, (a + SHARD).min(idx.len()))).collect();
    let shard_grads = pool.map(&mut jobs, |&mut (a, b)| -> Result<Vec<f64>, PpoError> {
        let mut g = layout.zeros();
        for k in a..b {
            let s = &batch.samples[idx[k]];
            let (out, trace) = &forwards[k];
            let (dm, dls) = log_prob_grad(&out.mean, &out.log_std, &s.action);
            let d = lg.d_log_prob[k];
            let d_mean: Vec<f64> = dm.iter().map(|v| d * v).collect();
            let d_ls: Vec<f64> = dls.iter().map(|v| d * v - cfg.entropy_coef * inv).collect();
            ens.backward(trace, &d_mean, &d_ls, lg.d_value[k], layout, &mut g)?;
        }
        Ok(g)
    });
    let shard_grads = shard_grads.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok((lg.terms, tree_reduce(shard_grads)))
}

fn gather(ens: &PolicyEnsemble, layout: &GradLayout) -> Vec<f64> {
    let mut p = Vec::with_capacity(layout.len());
    for (t, _) in layout.entries() {
        p.extend_from_slice(ens.tensor(*t));
    }
    p
}

fn scatter(ens: &mut PolicyEnsemble, layout: &GradLayout, p: &[f64]) {
    for (t, r) in layout.entries() {
        ens.tensor_mut(*t).copy_from_slice(&p[r.clone()]);
    }
}

/// Minibatched multi-epoch PPO on `batch`, applying Adam to the `trainable`
/// components only; a trainable component flagged in `ens.frozen` is an error. Every other component is hashed before and after; any
/// change is reported as [`PpoError::FreezeViolation`].
#[allow(clippy::too_many_arguments)]
pub fn ppo_update(
    ens: &mut PolicyEnsemble,
    batch: &RolloutBatch,
    cfg: &PpoConfig,
    trainable: &BTreeSet<Component>,
    mode: PolicyMode,
    adam: &mut AdamState,
    update_index: u64,
    seed_value: u64,
    pool: &WorkerPool,
) -> Result<UpdateStats, PpoError> {
    if let Some(c) = trainable.iter().find(|c| ens.frozen.contains(c)) {
        return Err(PolicyError::Frozen(*c).into());
    }
    let layout = GradLayout::new(ens, trainable);
    if adam.len() != layout.len() {
        return Err(PpoError::Shape(format!("optimizer holds {} entries, trainable set has {}", adam.len(), layout.len())));
    }
    let frozen: BTreeMap<Component, [u8; 32]> = ens
        .components()
        .into_iter()
        .filter(|c| !trainable.contains(c))
        .map(|c| (c, ens.fingerprint(c)))
        .collect();

    let (adv, ret) = batch_targets(batch, cfg)?;
    let mut stats = UpdateStats {
        update_index,
        mean_reward: batch.mean_reward,
        mean_s: (!batch.finished_episodes.is_empty()).then(|| {
            batch.finished_episodes.iter().map(|&s| s as f64).sum::<f64>() / batch.finished_episodes.len() as f64
        }),
        lr: adam.lr,
        ..UpdateStats::default()
    };
    if layout.is_empty() {
        return Ok(stats);
    }

    let mb = cfg.minibatch_size.clamp(1, batch.len());
    let mut steps = 0usize;
    let mut indices: Vec<usize> = (0..batch.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = seed::rng(seed_value, &[seed::tag("minibatch"), update_index, epoch as u64]);
        indices.shuffle(&mut rng);
        for idx in indices.chunks(mb) {
            let (terms, mut grads) = match minibatch_gradient(ens, batch, idx, &adv, &ret, cfg, mode, &layout, pool) {
                Ok(v) => v,
                Err(PpoError::NonFiniteRatio) => {
                    stats.skipped_minibatches += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
            if cfg.max_grad_norm > 0.0 && norm > cfg.max_grad_norm {
                let k = cfg.max_grad_norm / norm;
                grads.iter_mut().for_each(|g| *g *= k);
            }
            let mut params = gather(ens, &layout);
            match adam.step(&mut params, &grads) {
                Ok(()) => scatter(ens, &layout, &params),
                Err(_) => {
                    stats.skipped_minibatches += 1;
                    continue;
                }
            }
            adam.lr = adaptive_lr(adam.lr, terms.approx_kl, cfg);
            steps += 1;
            stats.kl += terms.approx_kl;
            stats.policy_loss += terms.policy_loss;
            stats.value_loss += terms.value_loss;
            stats.total_loss += terms.total;
            stats.grad_norm += norm;
        }
    }
    if steps > 0 {
        let k = 1.0 / steps as f64;
        stats.kl *= k;
        stats.policy_loss *= k;
        stats.value_loss *= k;
        stats.total_loss *= k;
        stats.grad_norm *= k;
    }
    stats.lr = adam.lr;

    for (c, h) in &frozen {
        if ens.fingerprint(*c) != *h {
            return Err(PpoError::FreezeViolation(*c));
        }
    }
    Ok(stats)
}
