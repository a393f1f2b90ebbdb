//! Vectorized stepping over independently seeded environments.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::dynamics::{env_reset, env_step, EnvParams, EnvState, StepResult};
use super::objects::ObjectSpec;
use super::trajlog::{LoggedStep, TrajectoryLog};
use super::EnvError;
use crate::policy::SmootherState;
use crate::seed;

/// Resumable per-env state.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvSnapshot {
    pub object_idx: usize,
    pub state: EnvState,
    pub smoother_prev: [f64; crate::policy::dims::NUM_JOINTS],
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
}

/// What the policy sees for one environment.
pub struct Observation<'a> {
    pub env_id: usize,
    pub obs: Vec<f64>,
    pub e_phys: Vec<f64>,
    pub object: &'a ObjectSpec,
    /// Position of `object` in the env's pool.
    pub object_idx: usize,
}

/// One environment instance: state, object, action smoother and its own RNG
/// stream keyed by `(seed, id)`. Episodes reset automatically on termination,
/// drawing a new object from the pool.
#[derive(Clone, Debug)]
pub struct Env {
    pub id: usize,
    pub objects: Arc<Vec<ObjectSpec>>,
    pub object_idx: usize,
    pub state: EnvState,
    pub smoother: SmootherState,
    pub rng: ChaCha8Rng,
    pub params: Arc<EnvParams>,
    /// Success counts of completed episodes, oldest first.
    pub finished: Vec<u32>,
    log: Option<TrajectoryLog>,
    pub finished_logs: Vec<TrajectoryLog>,
}

impl Env {
    pub fn new(id: usize, objects: Arc<Vec<ObjectSpec>>, params: Arc<EnvParams>, alpha: f64, seed_value: u64) -> Self {
        assert!(!objects.is_empty(), "environment needs at least one object");
        let rng = seed::rng(seed_value, &[seed::tag("env"), id as u64]);
        let state = env_reset(&objects[0], &params, &mut seed::rng(0, &[]));
        let mut env = Self {
            id,
            objects,
            object_idx: 0,
            state,
            smoother: SmootherState::new(alpha),
            rng,
            params,
            finished: Vec::new(),
            log: None,
            finished_logs: Vec::new(),
        };
        env.reset();
        env
    }

    /// Everything needed to resume this env bit-exactly, minus its object pool
    /// and parameters. Completed-episode records are not carried over.
    pub fn snapshot(&self) -> EnvSnapshot {
        EnvSnapshot {
            object_idx: self.object_idx,
            state: self.state.clone(),
            smoother_prev: self.smoother.prev,
            rng_seed: self.rng.get_seed(),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn restore(
        id: usize,
        objects: Arc<Vec<ObjectSpec>>,
        params: Arc<EnvParams>,
        alpha: f64,
        snap: EnvSnapshot,
    ) -> Result<Self, EnvError> {
        if snap.object_idx >= objects.len() {
            return Err(EnvError::Format {
                what: "env snapshot",
                detail: format!("object index {} outside pool of {}", snap.object_idx, objects.len()),
            });
        }
        let mut rng = ChaCha8Rng::from_seed(snap.rng_seed);
        rng.set_stream(snap.rng_stream);
        rng.set_word_pos(snap.rng_word_pos);
        let mut smoother = SmootherState::new(alpha);
        smoother.prev = snap.smoother_prev;
        Ok(Self {
            id,
            objects,
            object_idx: snap.object_idx,
            state: snap.state,
            smoother,
            rng,
            params,
            finished: Vec::new(),
            log: None,
            finished_logs: Vec::new(),
        })
    }

    pub fn object(&self) -> &ObjectSpec {
        &self.objects[self.object_idx]
    }

    /// Starts a new episode on an object drawn from the pool.
    pub fn reset(&mut self) {
        self.object_idx = if self.objects.len() == 1 { 0 } else { self.rng.gen_range(0..self.objects.len()) };
        self.state = env_reset(&self.objects[self.object_idx], &self.params, &mut self.rng);
        self.smoother.prev = [0.0; crate::policy::dims::NUM_JOINTS];
        if self.log.is_some() {
            self.log = Some(TrajectoryLog::new(self.object(), &self.params));
        }
    }

    /// Records every subsequent episode; completed logs land in `finished_logs`.
    pub fn enable_logging(&mut self) {
        self.log = Some(TrajectoryLog::new(self.object(), &self.params));
    }

    pub fn observe(&self) -> Observation<'_> {
        Observation {
            env_id: self.id,
            obs: self.state.observation(),
            e_phys: self.state.e_phys(self.object(), self.params.phys_dim),
            object: self.object(),
            object_idx: self.object_idx,
        }
    }

    /// Smooths and executes `action`. On error the environment is unchanged.
    pub fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        if action.iter().any(|a| !a.is_finite()) {
            return Err(EnvError::NonFiniteAction);
        }
        let mut smoother = self.smoother.clone();
        let a_bar = smoother.smooth(action);
        let obj = &self.objects[self.object_idx];
        let (next, result) = env_step(&self.state, obj, &a_bar, &self.params, &mut self.rng)?;
        self.smoother = smoother;
        if let Some(log) = self.log.as_mut() {
            log.steps.push(LoggedStep::capture(&next, &result));
        }
        self.state = next;
        if result.terminal {
            self.finished.push(self.state.success_count);
            if let Some(mut done) = self.log.take() {
                done.online_successes = self.state.success_count;
                self.finished_logs.push(done);
                self.log = Some(TrajectoryLog::new(self.object(), &self.params));
            }
            self.reset();
        }
        Ok(result)
    }
}

/// Fixed-size thread pool for batch stepping. Results never depend on its size.
pub struct WorkerPool {
    pool: Option<rayon::ThreadPool>,
}

impl WorkerPool {
    pub fn new(workers: usize) -> Self {
        let pool = (workers > 1).then(|| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .expect("thread pool")
        });
        Self { pool }
    }

    pub fn workers(&self) -> usize {
        self.pool.as_ref().map_or(1, |p| p.current_num_threads())
    }

    /// Maps `f` over `items` in parallel; the output keeps item order.
    pub fn map<T: Send, U: Send>(&self, items: &mut [T], f: impl Fn(&mut T) -> U + Sync + Send) -> Vec<U> {
        match &self.pool {
            None => items.iter_mut().map(f).collect(),
            Some(p) => p.install(|| items.par_iter_mut().map(f).collect()),
        }
    }
}

/// Advances every environment by one control step. `policy` maps an observation
/// and the env's own RNG to an action (plus any per-step payload). A failing env
/// reports its error and is left unchanged; the others still step.
pub fn batch_step<T, F>(envs: &mut [Env], pool: &WorkerPool, policy: F) -> Vec<Result<(T, StepResult), EnvError>>
where
    T: Send,
    F: Fn(&Observation<'_>, &mut ChaCha8Rng) -> Result<(T, Vec<f64>), EnvError> + Sync + Send,
{
    pool.map(envs, |env| {
        let mut rng = env.rng.clone();
        let (payload, action) = policy(&env.observe(), &mut rng)?;
        let saved = std::mem::replace(&mut env.rng, rng);
        match env.step(&action) {
            Ok(r) => Ok((payload, r)),
            Err(e) => {
                env.rng = saved;
                Err(e)
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::objects::generate_objects;
    use rand_distr::{Distribution, Uniform};

    fn make_envs(n: usize) -> Vec<Env> {
        let objects = Arc::new(generate_objects(12, 1).unwrap());
        let params = Arc::new(EnvParams::default());
        (0..n).map(|i| Env::new(i, objects.clone(), params.clone(), 0.8, 42)).collect()
    }

    fn random_policy(_: &Observation<'_>, rng: &mut ChaCha8Rng) -> Result<((), Vec<f64>), EnvError> {
        let u = Uniform::new(-1.0, 1.0);
        Ok(((), (0..11).map(|_| u.sample(rng)).collect()))
    }

    fn run(workers: usize, steps: usize) -> Vec<EnvState> {
        let mut envs = make_envs(9);
        let pool = WorkerPool::new(workers);
        for _ in 0..steps {
            for r in batch_step(&mut envs, &pool, random_policy) {
                r.unwrap();
            }
        }
        envs.into_iter().map(|e| e.state).collect()
    }

    #[test]
    fn worker_count_does_not_change_results() {
        assert_eq!(run(1, 40), run(8, 40));
    }

    #[test]
    fn env_trajectory_independent_of_batch_order() {
        let mut a = make_envs(4);
        let mut b: Vec<Env> = make_envs(4).into_iter().rev().collect();
        let pool = WorkerPool::new(1);
        for _ in 0..25 {
            batch_step(&mut a, &pool, random_policy);
            batch_step(&mut b, &pool, random_policy);
        }
        for e in &a {
            let twin = b.iter().find(|x| x.id == e.id).unwrap();
            assert_eq!(e.state, twin.state);
        }
    }

    #[test]
    fn single_env_batch_matches_direct_step() {
        let mut batch = make_envs(1);
        let mut direct = make_envs(1);
        let pool = WorkerPool::new(1);
        let r = batch_step(&mut batch, &pool, random_policy).pop().unwrap().unwrap().1;
        let mut rng = direct[0].rng.clone();
        let (_, action) = random_policy(&direct[0].observe(), &mut rng).unwrap();
        direct[0].rng = rng;
        let r2 = direct[0].step(&action).unwrap();
        assert_eq!(r, r2);
        assert_eq!(batch[0].state, direct[0].state);
    }

    #[test]
    fn errors_do_not_abort_the_batch() {
        let mut envs = make_envs(3);
        let before = envs[1].state.clone();
        let pool = WorkerPool::new(2);
        let out = batch_step(&mut envs, &pool, |o, rng| {
            if o.env_id == 1 {
                Ok(((), vec![f64::NAN; 11]))
            } else {
                random_policy(o, rng)
            }
        });
        assert!(out[0].is_ok() && out[2].is_ok());
        assert!(matches!(out[1], Err(EnvError::NonFiniteAction)));
        assert_eq!(envs[1].state, before);
        assert_eq!(envs[0].state.t, 1);
    }

    #[test]
    fn episodes_auto_reset() {
        let objects = Arc::new(generate_objects(3, 1).unwrap());
        let params = Arc::new(EnvParams { episode_length: 5, ..EnvParams::default() });
        let mut env = Env::new(0, objects, params, 0.8, 1);
        for _ in 0..12 {
            env.step(&[0.0; 11]).unwrap();
        }
        assert_eq!(env.finished.len(), 2);
        assert_eq!(env.state.t, 2);
    }
}
