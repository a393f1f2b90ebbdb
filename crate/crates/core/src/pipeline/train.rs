use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::checkpoint::Stage;
use super::config::{hex, Config};
use super::state::{component_name, TrainState};
use super::taxonomy::Taxonomy;
use super::PipelineError;
use crate::env::{Env, EnvParams, ObjectSpec, WorkerPool};
use crate::eval::evaluate_objects;
use crate::nn::AdamState;
use crate::policy::{Component, GradLayout, PolicyEnsemble, PolicyMode};
use crate::ppo::{append_stats_csv, collect_rollout, ppo_update, UpdateStats};
use crate::seed;

/// A unit of training: the base stack, one expert, or the gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Slot {
    Base,
    Expert(usize),
    Gate,
}

impl Slot {
    pub fn name(&self) -> String {
        match self {
            Slot::Base => "base".into(),
            Slot::Expert(i) => format!("expert.{i}"),
            Slot::Gate => "gate".into(),
        }
    }

    /// Seed key for the slot's environment and minibatch streams.
    pub fn key(&self) -> u64 {
        match self {
            Slot::Base => seed::tag("slot.base"),
            Slot::Expert(i) => seed::derive(seed::tag("slot.expert"), &[*i as u64]),
            Slot::Gate => seed::tag("slot.gate"),
        }
    }

    pub fn mode(&self) -> PolicyMode {
        match self {
            Slot::Base => PolicyMode::Base,
            Slot::Expert(i) => PolicyMode::Expert(*i),
            Slot::Gate => PolicyMode::Moe,
        }
    }

    /// Base training updates both encoders; experts and gate train alone.
    pub fn trainable(&self) -> BTreeSet<Component> {
        match self {
            Slot::Base => [Component::MuPc, Component::MuE, Component::Base].into(),
            Slot::Expert(i) => [Component::Expert(*i)].into(),
            Slot::Gate => [Component::Gate].into(),
        }
    }
}

/// What a slot trained on and what it left untouched.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotAudit {
    pub slot: String,
    pub allowed_categories: Vec<usize>,
    pub seen_categories: Vec<usize>,
    /// Rollout samples whose object was outside the slot's data filter.
    pub violations: u64,
    pub updates: u64,
    pub frozen_before: BTreeMap<String, String>,
    pub frozen_after: BTreeMap<String, String>,
}

impl SlotAudit {
    pub fn frozen_unchanged(&self) -> bool {
        self.frozen_before == self.frozen_after
    }
}

/// A slot in progress: its environments, optimizer and counters.
#[derive(Clone, Debug)]
pub struct SlotRun {
    pub slot: Slot,
    pub key: u64,
    pub mode: PolicyMode,
    pub trainable: BTreeSet<Component>,
    /// Training objects this slot may roll out on, ascending.
    pub object_ids: Vec<usize>,
    pub envs: Vec<Env>,
    pub adam: AdamState,
    pub update: u64,
    pub audit: SlotAudit,
}

pub(super) fn frozen_fingerprints(ens: &PolicyEnsemble, trainable: &BTreeSet<Component>) -> BTreeMap<String, String> {
    ens.components()
        .into_iter()
        .filter(|c| !trainable.contains(c))
        .map(|c| (component_name(c), hex(&ens.fingerprint(c))))
        .collect()
}

fn all_finite(ens: &PolicyEnsemble) -> bool {
    ens.tensor_ids().into_iter().all(|t| ens.tensor(t).iter().all(|v| v.is_finite()))
}

/// Training driver over one set of training objects.
pub struct Pipeline<'a> {
    pub cfg: Config,
    /// Training-split objects.
    pub objects: Arc<Vec<ObjectSpec>>,
    pub pool: &'a WorkerPool,
    /// Stage checkpoints, periodic checkpoints and stats go here when set.
    pub out: Option<PathBuf>,
}

impl<'a> Pipeline<'a> {
    pub fn new(cfg: Config, objects: Vec<ObjectSpec>, pool: &'a WorkerPool, out: Option<PathBuf>) -> Self {
        Self { cfg, objects: Arc::new(objects), pool, out }
    }

    pub fn train_params(&self) -> Arc<EnvParams> {
        Arc::new(self.cfg.train_env_params())
    }

    /// Fresh ensemble from the configured seed.
    pub fn init_state(&self) -> Result<TrainState, PipelineError> {
        let c = &self.cfg;
        let ensemble = PolicyEnsemble::new(c.arch.clone(), c.n_experts, c.router, c.gate_view, c.seed)?;
        Ok(TrainState::new(ensemble))
    }

    /// Subset of the training objects with the given ids, in id order.
    pub fn object_pool(&self, ids: &[usize]) -> Arc<Vec<ObjectSpec>> {
        Arc::new(self.objects.iter().filter(|o| ids.binary_search(&o.id).is_ok()).cloned().collect())
    }

    pub fn all_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.objects.iter().map(|o| o.id).collect();
        ids.sort_unstable();
        ids
    }

    /// Opens a slot with explicit mode, trainable set, seed key and data filter.
    pub fn begin_custom(
        &self,
        ens: &mut PolicyEnsemble,
        slot: Slot,
        key: u64,
        mode: PolicyMode,
        trainable: BTreeSet<Component>,
        mut object_ids: Vec<usize>,
    ) -> Result<SlotRun, PipelineError> {
        object_ids.sort_unstable();
        object_ids.dedup();
        let pool = self.object_pool(&object_ids);
        if pool.is_empty() {
            return Err(PipelineError::Taxonomy(format!("{} has no training objects", slot.name())));
        }
        let params = self.train_params();
        let env_seed = seed::derive(self.cfg.seed, &[seed::tag("slot"), key]);
        let envs = (0..self.cfg.num_envs)
            .map(|i| Env::new(i, pool.clone(), params.clone(), self.cfg.smoothing_alpha, env_seed))
            .collect();
        ens.frozen = ens.components().into_iter().filter(|c| !trainable.contains(c)).collect();
        let layout = GradLayout::new(ens, &trainable);
        let audit = SlotAudit {
            slot: slot.name(),
            allowed_categories: pool.iter().map(|o| o.category).collect::<BTreeSet<_>>().into_iter().collect(),
            frozen_before: frozen_fingerprints(ens, &trainable),
            ..SlotAudit::default()
        };
        Ok(SlotRun {
            slot,
            key,
            mode,
            adam: AdamState::new(layout.len(), self.cfg.ppo.lr),
            trainable,
            object_ids,
            envs,
            update: 0,
            audit,
        })
    }

    pub fn begin_slot(&self, ens: &mut PolicyEnsemble, slot: Slot, object_ids: Vec<usize>) -> Result<SlotRun, PipelineError> {
        self.begin_custom(ens, slot, slot.key(), slot.mode(), slot.trainable(), object_ids)
    }

    /// One rollout plus one PPO update on the active slot. A non-finite loss or
    /// parameter restores the pre-update state, saves it when an output
    /// directory is set, and fails.
    pub fn step(&self, state: &mut TrainState) -> Result<UpdateStats, PipelineError> {
        let TrainState { ensemble, active, .. } = state;
        let run = active.as_mut().ok_or_else(|| PipelineError::StageOrder("no active training slot".into()))?;
        let c = &self.cfg;
        let batch = collect_rollout(ensemble, run.mode, &mut run.envs, self.pool, c.ppo.horizon, c.ppo.reward_scale)?;
        let mut seen: BTreeSet<usize> = run.audit.seen_categories.iter().copied().collect();
        for s in &batch.samples {
            let obj = &batch.objects[s.object_idx];
            seen.insert(obj.category);
            if run.object_ids.binary_search(&obj.id).is_err() {
                run.audit.violations += 1;
            }
        }
        run.audit.seen_categories = seen.into_iter().collect();

        let before = (ensemble.clone(), run.adam.clone());
        let ppo_seed = seed::derive(c.seed, &[seed::tag("ppo"), run.key]);
        let stats = ppo_update(ensemble, &batch, &c.ppo, &run.trainable, run.mode, &mut run.adam, run.update, ppo_seed, self.pool)?;
        let losses_finite = [stats.policy_loss, stats.value_loss, stats.total_loss, stats.kl].iter().all(|v| v.is_finite());
        if !losses_finite || !all_finite(ensemble) {
            (*ensemble, run.adam) = before;
            let slot = run.slot.name();
            let update = run.update;
            let checkpoint = match &self.out {
                Some(dir) => {
                    let p = dir.join("checkpoints").join("last_good.ckpt");
                    self.save(state, &p)?;
                    Some(p)
                }
                None => None,
            };
            return Err(PipelineError::Diverged { slot, update, checkpoint });
        }
        run.update += 1;
        run.audit.updates = run.update;
        if let Some(dir) = &self.out {
            append_stats_csv(&dir.join("stats").join(format!("{}.csv", run.slot.name())), std::slice::from_ref(&stats))?;
            let every = c.budget.checkpoint_every;
            if every > 0 && run.update % every == 0 {
                self.save(state, &dir.join("checkpoints").join("latest.ckpt"))?;
            }
        }
        Ok(stats)
    }

    /// Steps the active slot until it has done `budget` updates.
    pub fn run_active(&self, state: &mut TrainState, budget: u64) -> Result<Vec<UpdateStats>, PipelineError> {
        let mut out = Vec::new();
        while state.active.as_ref().is_some_and(|r| r.update < budget) {
            let s = self.step(state)?;
            if s.update_index % 50 == 49 {
                log::info!(
                    "{} update {}: reward {:.3} kl {:.4} lr {:.2e}",
                    state.active.as_ref().map(|r| r.slot.name()).unwrap_or_default(),
                    s.update_index + 1,
                    s.mean_reward,
                    s.kl,
                    s.lr
                );
            }
            out.push(s);
        }
        Ok(out)
    }

    /// Closes the active slot and files its audit.
    pub fn finish_active(&self, state: &mut TrainState) {
        if let Some(mut run) = state.active.take() {
            run.audit.frozen_after = frozen_fingerprints(&state.ensemble, &run.trainable);
            state.audits.push(run.audit);
        }
        state.ensemble.frozen.clear();
    }

    fn ensure_slot(&self, state: &mut TrainState, slot: Slot, ids: Vec<usize>) -> Result<(), PipelineError> {
        if state.active.as_ref().is_some_and(|r| r.slot == slot) {
            return Ok(());
        }
        if let Some(r) = &state.active {
            return Err(PipelineError::StageOrder(format!("{} is still active", r.slot.name())));
        }
        let run = self.begin_slot(&mut state.ensemble, slot, ids)?;
        state.active = Some(run);
        Ok(())
    }

    fn save_stage(&self, state: &TrainState) -> Result<(), PipelineError> {
        if let Some(dir) = &self.out {
            self.save(state, &dir.join(format!("{}.ckpt", state.stage)))?;
        }
        Ok(())
    }

    /// Stage 1: encoders and base head on every training object.
    pub fn train_base(&self, state: &mut TrainState) -> Result<(), PipelineError> {
        if state.stage != Stage::Init {
            return Err(PipelineError::StageOrder(format!("base training needs a fresh state, found stage {}", state.stage)));
        }
        self.ensure_slot(state, Slot::Base, self.all_ids())?;
        self.run_active(state, self.cfg.budget.base_updates)?;
        self.finish_active(state);
        state.stage = Stage::Base;
        self.save_stage(state)
    }

    /// Per-category mean success of the base policy, worst first; ties go to the
    /// lower mean return, then the lower category index.
    pub fn rank_categories(&self, ens: &PolicyEnsemble) -> Result<Vec<usize>, PipelineError> {
        let params = self.cfg.eval_env_params();
        let results = evaluate_objects(
            ens,
            PolicyMode::Base,
            &self.objects,
            &params,
            self.cfg.smoothing_alpha,
            self.cfg.budget.taxonomy_episodes,
            seed::derive(self.cfg.seed, &[seed::tag("taxonomy")]),
            self.pool,
        )?;
        let mut per: BTreeMap<usize, (f64, f64, usize)> = BTreeMap::new();
        for r in &results {
            let e = per.entry(r.category).or_default();
            e.0 += r.s_mean;
            e.1 += r.mean_return;
            e.2 += 1;
        }
        let mut rows: Vec<(usize, f64, f64)> =
            per.into_iter().map(|(c, (s, ret, n))| (c, s / n as f64, ret / n as f64)).collect();
        rows.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.2.total_cmp(&b.2)).then(a.0.cmp(&b.0)));
        log::info!("category ranking (worst first): {rows:?}");
        Ok(rows.into_iter().map(|r| r.0).collect())
    }

    /// Stage 2: experts copied from the base head, each fine-tuned on its own
    /// subset with everything else frozen.
    pub fn train_experts(&self, state: &mut TrainState) -> Result<(), PipelineError> {
        if state.stage != Stage::Base {
            return Err(PipelineError::StageOrder(format!("expert training needs a base checkpoint, found stage {}", state.stage)));
        }
        let c = &self.cfg;
        if state.taxonomy.is_none() {
            let ranking = if c.n_experts == 4 { Some(self.rank_categories(&state.ensemble)?) } else { None };
            let taxonomy = Taxonomy::build(c.n_experts, &self.objects, ranking.as_deref())?;
            state.ensemble.reset_moe(c.n_experts, c.router, c.gate_view, c.seed)?;
            state.ranking = ranking;
            state.taxonomy = Some(taxonomy);
            state.experts_done = 0;
        }
        let taxonomy = state.taxonomy.clone().expect("taxonomy set above");
        for i in state.experts_done..taxonomy.experts.len() {
            self.ensure_slot(state, Slot::Expert(i), taxonomy.experts[i].object_ids.clone())?;
            self.run_active(state, c.budget.expert_updates)?;
            self.finish_active(state);
            state.experts_done = i + 1;
        }
        state.stage = Stage::Experts;
        self.save_stage(state)
    }

    /// Stage 3: only the gate trains, routing over the frozen experts.
    pub fn train_gate(&self, state: &mut TrainState) -> Result<(), PipelineError> {
        if state.stage != Stage::Experts {
            return Err(PipelineError::StageOrder(format!("gate training needs an experts checkpoint, found stage {}", state.stage)));
        }
        if state.active.is_none() {
            state.ensemble.set_router(self.cfg.router)?;
            if state.ensemble.gate_view != self.cfg.gate_view {
                state.ensemble.reset_gate(self.cfg.gate_view, self.cfg.seed)?;
            }
        }
        self.ensure_slot(state, Slot::Gate, self.all_ids())?;
        self.run_active(state, self.cfg.budget.gate_updates)?;
        self.finish_active(state);
        state.stage = Stage::Gate;
        self.save_stage(state)
    }

    /// Runs whatever stages remain.
    pub fn run_all(&self, state: &mut TrainState) -> Result<(), PipelineError> {
        if state.stage == Stage::Init {
            self.train_base(state)?;
        }
        if state.stage == Stage::Base {
            self.train_experts(state)?;
        }
        if state.stage == Stage::Experts {
            self.train_gate(state)?;
        }
        Ok(())
    }

    pub fn save(&self, state: &TrainState, path: &Path) -> Result<(), PipelineError> {
        state.to_checkpoint(&self.cfg, &self.objects).save(path)?;
        Ok(())
    }

    /// Restores a state for further training under this pipeline's config and
    /// objects, which must match the ones it was written with.
    pub fn load(&self, path: &Path) -> Result<TrainState, PipelineError> {
        let ckpt = super::checkpoint::Checkpoint::load(path)?;
        TrainState::from_checkpoint(&ckpt, &self.cfg, &self.objects)
    }
}
