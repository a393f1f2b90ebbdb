use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::checkpoint::{Checkpoint, CheckpointError, Stage};
use super::config::{hex, Config};
use super::taxonomy::Taxonomy;
use super::train::{Slot, SlotAudit, SlotRun};
use super::PipelineError;
use crate::env::{Env, EnvSnapshot, EnvState, ObjectSpec, Quat};
use crate::nn::AdamState;
use crate::policy::dims::NUM_JOINTS;
use crate::policy::{Architecture, Component, GateView, PolicyEnsemble, PolicyMode, RouterMode};

/// Everything the pipeline needs to continue training bit-exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    /// Last completed stage.
    pub stage: Stage,
    pub ensemble: PolicyEnsemble,
    pub taxonomy: Option<Taxonomy>,
    /// Categories ordered worst first by the base evaluation pass.
    pub ranking: Option<Vec<usize>>,
    pub experts_done: usize,
    pub active: Option<SlotRun>,
    pub audits: Vec<SlotAudit>,
}

pub fn component_name(c: Component) -> String {
    match c {
        Component::MuPc => "mu_pc".into(),
        Component::MuE => "mu_e".into(),
        Component::Base => "base".into(),
        Component::Expert(i) => format!("expert.{i}"),
        Component::Gate => "gate".into(),
    }
}

/// SHA-256 over the canonical JSON encoding of an object list.
pub fn objects_hash(objects: &[ObjectSpec]) -> String {
    hex(&Sha256::digest(serde_json::to_vec(objects).expect("objects serialize")))
}

#[derive(Serialize, Deserialize)]
struct EnsembleMeta {
    arch: Architecture,
    n_experts: usize,
    router: RouterMode,
    gate_view: GateView,
    frozen: Vec<Component>,
}

#[derive(Serialize, Deserialize)]
struct ActiveMeta {
    slot: Slot,
    key: u64,
    mode: PolicyMode,
    trainable: Vec<Component>,
    object_ids: Vec<usize>,
    update: u64,
    n_envs: usize,
    audit: SlotAudit,
}

/// q, joint velocity, ρ, x, v, ω, h, goal, histories, smoother.
const ENV_F64: usize = 2 * NUM_JOINTS + 4 + 3 * 3 + 1 + 4 + 6 * NUM_JOINTS + NUM_JOINTS;
const ENV_U64: usize = 11;

fn env_to_arrays(s: &EnvSnapshot, f: &mut Vec<f64>, u: &mut Vec<u64>) {
    let st = &s.state;
    f.extend_from_slice(&st.q);
    f.extend_from_slice(&st.joint_vel);
    f.extend_from_slice(&st.rho.to_array());
    f.extend_from_slice(&st.x);
    f.extend_from_slice(&st.v);
    f.extend_from_slice(&st.omega);
    f.push(st.h);
    f.extend_from_slice(&st.goal.to_array());
    st.q_hist.iter().chain(&st.a_hist).for_each(|r| f.extend_from_slice(r));
    f.extend_from_slice(&s.smoother_prev);
    u.extend_from_slice(&[s.object_idx as u64, st.hold_counter as u64, st.success_count as u64, st.t as u64]);
    u.push(s.rng_stream);
    u.push(s.rng_word_pos as u64);
    u.push((s.rng_word_pos >> 64) as u64);
    for c in s.rng_seed.chunks_exact(8) {
        u.push(u64::from_le_bytes(c.try_into().unwrap()));
    }
}

fn env_from_arrays(f: &[f64], u: &[u64]) -> EnvSnapshot {
    let mut pos = 0;
    let mut take = |n: usize| {
        let s = &f[pos..pos + n];
        pos += n;
        s
    };
    let arr = |s: &[f64]| -> [f64; NUM_JOINTS] { s.try_into().unwrap() };
    let v3 = |s: &[f64]| -> [f64; 3] { s.try_into().unwrap() };
    let q = arr(take(NUM_JOINTS));
    let joint_vel = arr(take(NUM_JOINTS));
    let rho = Quat::from_array(take(4).try_into().unwrap());
    let x = v3(take(3));
    let v = v3(take(3));
    let omega = v3(take(3));
    let h = take(1)[0];
    let goal = Quat::from_array(take(4).try_into().unwrap());
    let q_hist = [arr(take(NUM_JOINTS)), arr(take(NUM_JOINTS)), arr(take(NUM_JOINTS))];
    let a_hist = [arr(take(NUM_JOINTS)), arr(take(NUM_JOINTS)), arr(take(NUM_JOINTS))];
    let smoother_prev = arr(take(NUM_JOINTS));
    let mut rng_seed = [0u8; 32];
    for (k, w) in u[7..11].iter().enumerate() {
        rng_seed[k * 8..k * 8 + 8].copy_from_slice(&w.to_le_bytes());
    }
    EnvSnapshot {
        object_idx: u[0] as usize,
        state: EnvState {
            q,
            joint_vel,
            rho,
            x,
            v,
            omega,
            h,
            goal,
            hold_counter: u[1] as usize,
            success_count: u[2] as u32,
            t: u[3] as usize,
            q_hist,
            a_hist,
        },
        smoother_prev,
        rng_seed,
        rng_stream: u[4],
        rng_word_pos: u[5] as u128 | ((u[6] as u128) << 64),
    }
}

fn meta_err(e: impl std::fmt::Display) -> CheckpointError {
    CheckpointError::Malformed(format!("metadata: {e}"))
}

/// Rebuilds the policy stack stored in a checkpoint.
pub fn load_ensemble(ckpt: &Checkpoint) -> Result<PolicyEnsemble, PipelineError> {
    let m: EnsembleMeta = serde_json::from_value(ckpt.meta["ensemble"].clone()).map_err(meta_err)?;
    let mut ens = PolicyEnsemble::new(m.arch, m.n_experts, m.router, m.gate_view, 0)?;
    for t in ens.tensor_ids() {
        let len = ens.tensor(t).len();
        let src = ckpt.f64s_len(&format!("param.{}", t.name()), len)?;
        ens.tensor_mut(t).copy_from_slice(src);
    }
    ens.frozen = m.frozen.into_iter().collect();
    Ok(ens)
}

impl TrainState {
    pub fn new(ensemble: PolicyEnsemble) -> Self {
        Self { stage: Stage::Init, ensemble, taxonomy: None, ranking: None, experts_done: 0, active: None, audits: Vec::new() }
    }

    pub fn to_checkpoint(&self, cfg: &Config, objects: &[ObjectSpec]) -> Checkpoint {
        let ens = &self.ensemble;
        let ens_meta = EnsembleMeta {
            arch: ens.arch.clone(),
            n_experts: ens.n_experts(),
            router: ens.router,
            gate_view: ens.gate_view,
            frozen: ens.frozen.iter().copied().collect(),
        };
        let active = self.active.as_ref().map(|r| ActiveMeta {
            slot: r.slot,
            key: r.key,
            mode: r.mode,
            trainable: r.trainable.iter().copied().collect(),
            object_ids: r.object_ids.clone(),
            update: r.update,
            n_envs: r.envs.len(),
            audit: r.audit.clone(),
        });
        let meta = json!({
            "format": "dexmoe-train-state",
            "stage": self.stage,
            "seed": cfg.seed,
            "objects_hash": objects_hash(objects),
            "ensemble": ens_meta,
            "taxonomy": self.taxonomy,
            "ranking": self.ranking,
            "experts_done": self.experts_done,
            "audits": self.audits,
            "active": active,
        });
        let mut ck = Checkpoint::new(self.stage, cfg.training_hash(), meta);
        for t in ens.tensor_ids() {
            let v = ens.tensor(t).to_vec();
            ck.put_f64(format!("param.{}", t.name()), &[v.len()], v);
        }
        if let Some(r) = &self.active {
            let a = &r.adam;
            ck.put_f64("slot.adam.m", &[a.len()], a.first_moment.clone());
            ck.put_f64("slot.adam.v", &[a.len()], a.second_moment.clone());
            ck.put_f64("slot.adam.scalars", &[4], vec![a.lr, a.beta1, a.beta2, a.eps]);
            ck.put_u64("slot.adam.step", &[1], vec![a.step_count]);
            let mut f = Vec::with_capacity(r.envs.len() * ENV_F64);
            let mut u = Vec::with_capacity(r.envs.len() * ENV_U64);
            for e in &r.envs {
                env_to_arrays(&e.snapshot(), &mut f, &mut u);
            }
            ck.put_f64("slot.envs.f64", &[r.envs.len(), ENV_F64], f);
            ck.put_u64("slot.envs.u64", &[r.envs.len(), ENV_U64], u);
        }
        ck
    }

    /// Inverse of [`TrainState::to_checkpoint`]. The config's training hash and
    /// the object list must match the ones recorded.
    pub fn from_checkpoint(ckpt: &Checkpoint, cfg: &Config, objects: &Arc<Vec<ObjectSpec>>) -> Result<Self, PipelineError> {
        if ckpt.config_hash != cfg.training_hash() {
            return Err(CheckpointError::ConfigMismatch {
                found: hex(&ckpt.config_hash),
                expected: hex(&cfg.training_hash()),
            }
            .into());
        }
        let recorded = ckpt.meta["objects_hash"].as_str().unwrap_or_default();
        if recorded != objects_hash(objects) {
            return Err(CheckpointError::Malformed("checkpoint was trained on a different object set".into()).into());
        }
        let ensemble = load_ensemble(ckpt)?;
        let get = |k: &str| ckpt.meta.get(k).cloned().unwrap_or(Value::Null);
        let taxonomy: Option<Taxonomy> = serde_json::from_value(get("taxonomy")).map_err(meta_err)?;
        let ranking: Option<Vec<usize>> = serde_json::from_value(get("ranking")).map_err(meta_err)?;
        let experts_done: usize = serde_json::from_value(get("experts_done")).map_err(meta_err)?;
        let audits: Vec<SlotAudit> = serde_json::from_value(get("audits")).map_err(meta_err)?;
        let active: Option<ActiveMeta> = serde_json::from_value(get("active")).map_err(meta_err)?;
        let active = match active {
            None => None,
            Some(m) => {
                if m.slot == Slot::Gate && (ensemble.router != cfg.router || ensemble.gate_view != cfg.gate_view) {
                    return Err(CheckpointError::Malformed(format!(
                        "gate training was started with router {} and gate input {}, config asks for {} and {}",
                        ensemble.router, ensemble.gate_view, cfg.router, cfg.gate_view
                    ))
                    .into());
                }
                let trainable: BTreeSet<Component> = m.trainable.into_iter().collect();
                let layout = crate::policy::GradLayout::new(&ensemble, &trainable);
                let s = ckpt.f64s_len("slot.adam.scalars", 4)?;
                let adam = AdamState {
                    first_moment: ckpt.f64s_len("slot.adam.m", layout.len())?.to_vec(),
                    second_moment: ckpt.f64s_len("slot.adam.v", layout.len())?.to_vec(),
                    step_count: ckpt.u64s_len("slot.adam.step", 1)?[0],
                    lr: s[0],
                    beta1: s[1],
                    beta2: s[2],
                    eps: s[3],
                };
                let pool: Arc<Vec<ObjectSpec>> =
                    Arc::new(objects.iter().filter(|o| m.object_ids.binary_search(&o.id).is_ok()).cloned().collect());
                let params = Arc::new(cfg.train_env_params());
                let f = ckpt.f64s_len("slot.envs.f64", m.n_envs * ENV_F64)?;
                let u = ckpt.u64s_len("slot.envs.u64", m.n_envs * ENV_U64)?;
                let envs = (0..m.n_envs)
                    .map(|i| {
                        let snap = env_from_arrays(&f[i * ENV_F64..(i + 1) * ENV_F64], &u[i * ENV_U64..(i + 1) * ENV_U64]);
                        Env::restore(i, pool.clone(), params.clone(), cfg.smoothing_alpha, snap)
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Some(SlotRun {
                    slot: m.slot,
                    key: m.key,
                    mode: m.mode,
                    trainable,
                    object_ids: m.object_ids,
                    envs,
                    adam,
                    update: m.update,
                    audit: m.audit,
                })
            }
        };
        Ok(Self { stage: ckpt.stage, ensemble, taxonomy, ranking, experts_done, active, audits })
    }
}
