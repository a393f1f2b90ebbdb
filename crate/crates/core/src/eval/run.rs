use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::metrics::{extreme_indices, mean_std, summarize, Summary};
use super::EvalError;
use crate::env::{Env, EnvParams, ObjectSpec, Split, TrajectoryLog, WorkerPool};
use crate::io::write_atomic;
use crate::policy::{PolicyEnsemble, PolicyMode};
use crate::seed;

/// Per-object evaluation result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectEval {
    pub id: usize,
    pub category: usize,
    pub episodes: usize,
    /// Registered successes per episode.
    pub successes: Vec<u32>,
    pub s_mean: f64,
    pub s_std: f64,
    pub s_best: u32,
    pub mean_return: f64,
    /// Gate weights averaged over all steps (MoE only).
    pub gate_mean: Option<Vec<f64>>,
    /// Gate weights averaged within each episode (MoE only).
    pub gate_episodes: Option<Vec<Vec<f64>>>,
}

/// Runs `episodes` deterministic episodes (action = policy mean) on one object.
/// The environment stream is keyed by `(seed, object id)`, so results do not
/// depend on which other objects are evaluated or in what order. With
/// `log_trajectories` the per-step logs are returned as well.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_object(
    ens: &PolicyEnsemble,
    mode: PolicyMode,
    obj: &ObjectSpec,
    params: &EnvParams,
    alpha: f64,
    episodes: usize,
    seed_value: u64,
    log_trajectories: bool,
) -> Result<(ObjectEval, Vec<TrajectoryLog>), EvalError> {
    if episodes == 0 {
        return Err(EvalError::NoEpisodes);
    }
    let env_seed = seed::derive(seed_value, &[seed::tag("eval"), obj.id as u64]);
    let mut env = Env::new(0, Arc::new(vec![obj.clone()]), Arc::new(params.clone()), alpha, env_seed);
    if log_trajectories {
        env.enable_logging();
    }
    // The shape descriptor depends only on the object.
    let shape = ens.encode_shape(&obj.pc_feature, obj.category)?;
    let n = ens.n_experts();
    let mut returns = Vec::with_capacity(episodes);
    let mut ret = 0.0;
    let mut gate_sum = vec![0.0; n];
    let mut gate_steps = 0usize;
    let mut gate_total = vec![0.0; n];
    let mut total_steps = 0usize;
    let mut gate_episodes = Vec::new();
    while env.finished.len() < episodes {
        let o = env.observe();
        let z = ens.encode_privileged(&o.e_phys, &shape.e_shape)?;
        let out = ens.policy_forward(&o.obs, &z, &shape.e_shape, mode)?;
        if let Some(w) = &out.gate_weights {
            gate_sum.iter_mut().zip(w).for_each(|(s, x)| *s += x);
            gate_steps += 1;
        }
        let step = env.step(&out.mean)?;
        ret += step.reward.total;
        if step.terminal {
            returns.push(ret);
            ret = 0.0;
            if gate_steps > 0 {
                gate_episodes.push(gate_sum.iter().map(|s| s / gate_steps as f64).collect::<Vec<_>>());
                gate_total.iter_mut().zip(&gate_sum).for_each(|(t, s)| *t += s);
                total_steps += gate_steps;
            }
            gate_sum.fill(0.0);
            gate_steps = 0;
        }
    }
    let successes = env.finished.clone();
    let s: Vec<f64> = successes.iter().map(|&x| x as f64).collect();
    let (s_mean, s_std) = mean_std(&s);
    let moe = mode == PolicyMode::Moe;
    let result = ObjectEval {
        id: obj.id,
        category: obj.category,
        episodes,
        s_best: successes.iter().copied().max().unwrap_or(0),
        successes,
        s_mean,
        s_std,
        mean_return: mean_std(&returns).0,
        gate_mean: moe.then(|| gate_total.iter().map(|t| t / total_steps.max(1) as f64).collect()),
        gate_episodes: moe.then_some(gate_episodes),
    };
    Ok((result, std::mem::take(&mut env.finished_logs)))
}

/// [`evaluate_object`] over many objects, in parallel, results in input order.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_objects(
    ens: &PolicyEnsemble,
    mode: PolicyMode,
    objects: &[ObjectSpec],
    params: &EnvParams,
    alpha: f64,
    episodes: usize,
    seed_value: u64,
    pool: &WorkerPool,
) -> Result<Vec<ObjectEval>, EvalError> {
    Ok(evaluate_objects_logged(ens, mode, objects, params, alpha, episodes, seed_value, false, pool)?.0)
}

/// Like [`evaluate_objects`], optionally keeping every episode's trajectory log.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_objects_logged(
    ens: &PolicyEnsemble,
    mode: PolicyMode,
    objects: &[ObjectSpec],
    params: &EnvParams,
    alpha: f64,
    episodes: usize,
    seed_value: u64,
    log_trajectories: bool,
    pool: &WorkerPool,
) -> Result<(Vec<ObjectEval>, Vec<TrajectoryLog>), EvalError> {
    let mut items: Vec<&ObjectSpec> = objects.iter().collect();
    let mut results = Vec::with_capacity(objects.len());
    let mut logs = Vec::new();
    for r in pool.map(&mut items, |obj| evaluate_object(ens, mode, obj, params, alpha, episodes, seed_value, log_trajectories)) {
        let (res, l) = r?;
        results.push(res);
        logs.extend(l);
    }
    Ok((results, logs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub seed: u64,
    pub config_hash: String,
    /// `base`, `expert.i` or `moe`.
    pub policy: String,
    pub episodes_per_object: usize,
    pub summary: Summary,
    pub five_means_degenerate: bool,
    pub worst5: Vec<usize>,
    pub best5: Vec<usize>,
    pub objects: Vec<ObjectEval>,
}

pub fn mode_name(mode: PolicyMode) -> String {
    match mode {
        PolicyMode::Base => "base".into(),
        PolicyMode::Expert(i) => format!("expert.{i}"),
        PolicyMode::Moe => "moe".into(),
    }
}

/// Evaluates every object of `split` and assembles the report.
#[allow(clippy::too_many_arguments)]
pub fn run_eval_suite(
    ens: &PolicyEnsemble,
    mode: PolicyMode,
    objects: &[ObjectSpec],
    split: Split,
    train_count: usize,
    params: &EnvParams,
    alpha: f64,
    episodes: usize,
    seed_value: u64,
    config_hash: &str,
    pool: &WorkerPool,
) -> Result<EvalReport, EvalError> {
    let suite = EvalSuite { split, train_count, episodes, seed: seed_value, log_trajectories: false };
    Ok(run_eval_suite_with(ens, mode, objects, &suite, params, alpha, config_hash, pool)?.0)
}

/// Settings of one evaluation pass.
#[derive(Clone, Copy, Debug)]
pub struct EvalSuite {
    pub split: Split,
    pub train_count: usize,
    pub episodes: usize,
    pub seed: u64,
    pub log_trajectories: bool,
}

/// [`run_eval_suite`] that can also return the trajectory logs.
#[allow(clippy::too_many_arguments)]
pub fn run_eval_suite_with(
    ens: &PolicyEnsemble,
    mode: PolicyMode,
    objects: &[ObjectSpec],
    suite: &EvalSuite,
    params: &EnvParams,
    alpha: f64,
    config_hash: &str,
    pool: &WorkerPool,
) -> Result<(EvalReport, Vec<TrajectoryLog>), EvalError> {
    let chosen = crate::env::split_objects(objects, suite.split, suite.train_count);
    if chosen.is_empty() {
        return Err(EvalError::EmptySplit(suite.split));
    }
    let (results, logs) =
        evaluate_objects_logged(ens, mode, &chosen, params, alpha, suite.episodes, suite.seed, suite.log_trajectories, pool)?;
    let s: Vec<f64> = results.iter().map(|r| r.s_mean).collect();
    let summary = summarize(&s)?;
    let (w, b) = extreme_indices(&s, 5);
    let report = EvalReport {
        split: suite.split,
        seed: suite.seed,
        config_hash: config_hash.to_string(),
        policy: mode_name(mode),
        episodes_per_object: suite.episodes,
        five_means_degenerate: summary.five_means_degenerate(),
        summary,
        worst5: w.iter().map(|&i| results[i].id).collect(),
        best5: b.iter().map(|&i| results[i].id).collect(),
        objects: results,
    };
    Ok((report, logs))
}

/// `objects.csv` (one row per object) and `summary.json` under `dir`.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<(), EvalError> {
    let mut csv = String::from("object_id,category,episodes,S_mean,S_std,S_best\n");
    for o in &report.objects {
        csv.push_str(&format!("{},{},{},{},{},{}\n", o.id, o.category, o.episodes, o.s_mean, o.s_std, o.s_best));
    }
    write_atomic(&dir.join("objects.csv"), csv.as_bytes())?;
    let summary = serde_json::json!({
        "split": report.split,
        "seed": report.seed,
        "config_hash": report.config_hash,
        "policy": report.policy,
        "episodes_per_object": report.episodes_per_object,
        "S_min": report.summary.s_min,
        "S_max": report.summary.s_max,
        "S5_minus": report.summary.s5_minus,
        "S5_plus": report.summary.s5_plus,
        "S_mean": report.summary.s_mean,
        "objects": report.summary.n,
        "five_means_degenerate": report.five_means_degenerate,
        "worst5_ids": report.worst5,
        "best5_ids": report.best5,
    });
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_atomic(&dir.join("summary.json"), text.as_bytes())?;
    Ok(())
}
