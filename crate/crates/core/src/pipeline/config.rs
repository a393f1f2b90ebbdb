//! Run configuration, stored as a flat JSON object with dotted keys. Each entry
//! is either a bare value or `{"value": ..., "provenance": "..."}`; keys that
//! are absent keep their defaults and unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::env::{EnvParams, RewardCoeffs, RewardProfile, SuccessThresholds};
use crate::policy::dims::{NUM_CATEGORIES, PHYS_DIM, PHYS_DIM_PADDED};
use crate::policy::{Architecture, GateView, RouterMode};
use crate::ppo::PpoConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config key `{key}`: {msg}")]
    Key { key: String, msg: String },
    #[error("config file: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn key_err(key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Key { key: key.to_string(), msg: msg.into() }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Budget {
    pub base_updates: u64,
    pub expert_updates: u64,
    pub gate_updates: u64,
    /// Save a resumable checkpoint every this many updates (0 disables).
    pub checkpoint_every: u64,
    /// Episodes per object in the evaluation pass that ranks categories.
    pub taxonomy_episodes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub object_count: usize,
    pub train_count: usize,
    pub categories: Vec<usize>,
    pub num_envs: usize,
    pub env: EnvParams,
    pub reward_profile: RewardProfile,
    /// Coefficients as written; the `corrected` profile uses `|c_rot|`.
    pub reward: RewardCoeffs,
    pub train_thresholds: SuccessThresholds,
    pub eval_thresholds: SuccessThresholds,
    pub ppo: PpoConfig,
    pub arch: Architecture,
    pub smoothing_alpha: f64,
    pub n_experts: usize,
    pub router: RouterMode,
    pub gate_view: GateView,
    pub budget: Budget,
    pub eval_episodes: usize,
}

impl Default for Config {
    /// Published hyperparameters, with invented values where none are given.
    fn default() -> Self {
        Self {
            seed: 0,
            object_count: 150,
            train_count: 100,
            categories: (0..NUM_CATEGORIES).collect(),
            num_envs: 32768,
            env: EnvParams::default(),
            reward_profile: RewardProfile::Corrected,
            reward: RewardProfile::PaperTable.coeffs(),
            train_thresholds: SuccessThresholds::TRAIN,
            eval_thresholds: SuccessThresholds::EVAL,
            ppo: PpoConfig { minibatch_size: 16384, ..PpoConfig::default() },
            arch: Architecture::paper(),
            smoothing_alpha: 0.8,
            n_experts: 4,
            router: RouterMode::Soft,
            gate_view: GateView::Full,
            budget: Budget {
                base_updates: 2000,
                expert_updates: 500,
                gate_updates: 300,
                checkpoint_every: 100,
                taxonomy_episodes: 1,
            },
            eval_episodes: 20,
        }
    }
}

/// Keys whose defaults come from the published hyperparameter table or text.
const PAPER_KEYS: &[&str] = &[
    "env.num_envs",
    "env.episode_length",
    "env.dt",
    "env.hold_window",
    "ppo.horizon",
    "ppo.minibatch_size",
    "ppo.lr",
    "ppo.clip",
    "ppo.kl_threshold",
    "ppo.gamma",
    "ppo.lambda",
    "success.train_tau_theta",
    "success.eval_tau_theta",
    "success.tau_q",
    "success.tau_v",
    "success.tau_omega",
    "reward.c_success",
    "reward.c_dist",
    "reward.c_rot",
    "reward.c_action",
    "reward.epsilon",
    "objects.count",
    "objects.train_count",
    "policy.base_hidden",
    "policy.mu_pc_hidden",
    "policy.mu_e_hidden",
    "policy.gate_hidden",
    "moe.n_experts",
    "moe.router",
    "moe.gate_view",
];

pub fn provenance(key: &str) -> &'static str {
    if PAPER_KEYS.contains(&key) {
        "paper"
    } else {
        "invented"
    }
}

fn router_str(r: RouterMode) -> &'static str {
    match r {
        RouterMode::Soft => "soft",
        RouterMode::TopK(_) => "topk",
        RouterMode::Switch => "switch",
    }
}

impl Config {
    /// Desk-scale variant: narrow networks, 64 envs, short budgets.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.num_envs = 64;
        c.ppo.minibatch_size = 256;
        c.arch = Architecture { init_log_std: -1.0, ..Architecture::desk() };
        c
    }

    /// Coefficients handed to the environment.
    pub fn effective_reward(&self) -> RewardCoeffs {
        let mut r = self.reward;
        if self.reward_profile == RewardProfile::Corrected {
            r.c_rot = r.c_rot.abs();
        }
        r
    }

    pub fn env_params(&self, thresholds: SuccessThresholds) -> EnvParams {
        EnvParams { reward: self.effective_reward(), thresholds, phys_dim: self.arch.phys_dim, ..self.env.clone() }
    }

    pub fn train_env_params(&self) -> EnvParams {
        self.env_params(self.train_thresholds)
    }

    pub fn eval_env_params(&self) -> EnvParams {
        self.env_params(self.eval_thresholds)
    }

    /// Every key with its current value.
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let e = &self.env;
        let r = &self.reward;
        let p = &self.ppo;
        let b = &self.budget;
        let topk = match self.router {
            RouterMode::TopK(k) => k,
            _ => 2,
        };
        let pairs = [
            ("seed", json!(self.seed)),
            ("objects.count", json!(self.object_count)),
            ("objects.train_count", json!(self.train_count)),
            ("objects.categories", json!(self.categories)),
            ("env.num_envs", json!(self.num_envs)),
            ("env.dt", json!(e.dt)),
            ("env.kp", json!(e.kp)),
            ("env.qdot_max", json!(e.qdot_max)),
            ("env.grasp_scale", json!(e.grasp_scale)),
            ("env.lambda_jam", json!(e.lambda_jam)),
            ("env.lambda_drift", json!(e.lambda_drift)),
            ("env.v_drop", json!(e.v_drop)),
            ("env.drop_distance", json!(e.drop_distance)),
            ("env.episode_length", json!(e.episode_length)),
            ("env.hold_window", json!(e.hold_window)),
            ("env.reset_noise", json!(e.reset_noise)),
            ("reward.profile", json!(match self.reward_profile {
                RewardProfile::PaperTable => "paper-table",
                RewardProfile::Corrected => "corrected",
            })),
            ("reward.c_success", json!(r.c_success)),
            ("reward.c_dist", json!(r.c_dist)),
            ("reward.c_rot", json!(r.c_rot)),
            ("reward.c_omega", json!(r.c_omega)),
            ("reward.omega_clip", json!(r.omega_clip)),
            ("reward.c_action", json!(r.c_action)),
            ("reward.epsilon", json!(r.epsilon)),
            ("success.train_tau_theta", json!(self.train_thresholds.tau_theta)),
            ("success.eval_tau_theta", json!(self.eval_thresholds.tau_theta)),
            ("success.tau_q", json!(self.eval_thresholds.tau_q)),
            ("success.tau_v", json!(self.eval_thresholds.tau_v)),
            ("success.tau_omega", json!(self.eval_thresholds.tau_omega)),
            ("ppo.clip", json!(p.clip)),
            ("ppo.gamma", json!(p.gamma)),
            ("ppo.lambda", json!(p.lambda)),
            ("ppo.lr", json!(p.lr)),
            ("ppo.kl_threshold", json!(p.kl_threshold)),
            ("ppo.lr_min", json!(p.lr_min)),
            ("ppo.lr_max", json!(p.lr_max)),
            ("ppo.minibatch_size", json!(p.minibatch_size)),
            ("ppo.epochs", json!(p.epochs)),
            ("ppo.entropy_coef", json!(p.entropy_coef)),
            ("ppo.value_coef", json!(p.value_coef)),
            ("ppo.max_grad_norm", json!(p.max_grad_norm)),
            ("ppo.horizon", json!(p.horizon)),
            ("ppo.reward_scale", json!(p.reward_scale)),
            ("policy.base_hidden", json!(self.arch.base_hidden)),
            ("policy.mu_pc_hidden", json!(self.arch.mu_pc_hidden)),
            ("policy.mu_e_hidden", json!(self.arch.mu_e_hidden)),
            ("policy.gate_hidden", json!(self.arch.gate_hidden)),
            ("policy.phys_dim", json!(self.arch.phys_dim)),
            ("policy.init_log_std", json!(self.arch.init_log_std)),
            ("policy.output_gain", json!(self.arch.output_gain)),
            ("policy.smoothing_alpha", json!(self.smoothing_alpha)),
            ("moe.n_experts", json!(self.n_experts)),
            ("moe.router", json!(router_str(self.router))),
            ("moe.topk", json!(topk)),
            ("moe.gate_view", json!(self.gate_view.to_string())),
            ("budget.base_updates", json!(b.base_updates)),
            ("budget.expert_updates", json!(b.expert_updates)),
            ("budget.gate_updates", json!(b.gate_updates)),
            ("budget.checkpoint_every", json!(b.checkpoint_every)),
            ("budget.taxonomy_episodes", json!(b.taxonomy_episodes)),
            ("eval.episodes", json!(self.eval_episodes)),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// The config as a documented file: every key with its value and provenance.
    /// A published value that was changed keeps a note of the original.
    pub fn to_document(&self) -> Value {
        let defaults = Config::default().to_flat();
        let map: serde_json::Map<String, Value> = self
            .to_flat()
            .into_iter()
            .map(|(k, v)| {
                let prov = match provenance(&k) {
                    "paper" if defaults.get(&k) != Some(&v) => format!("desk override, paper value {}", defaults[&k]),
                    p => p.to_string(),
                };
                (k, json!({ "value": v, "provenance": prov }))
            })
            .collect();
        Value::Object(map)
    }

    /// SHA-256 over the canonical flat encoding.
    pub fn hash(&self) -> [u8; 32] {
        let bytes = serde_json::to_vec(&self.to_flat()).expect("config serializes");
        Sha256::digest(&bytes).into()
    }

    pub fn hash_hex(&self) -> String {
        hex(&self.hash())
    }

    /// Hash over the keys that shape a training trajectory. Update budgets and
    /// evaluation settings are excluded so a run can be resumed with a larger
    /// budget. Router and gate input only matter once the gate trains, so an
    /// experts checkpoint can feed gates of any kind; a run stopped inside gate
    /// training is checked against them separately.
    pub fn training_hash(&self) -> [u8; 32] {
        let flat: BTreeMap<String, Value> = self
            .to_flat()
            .into_iter()
            .filter(|(k, _)| {
                !(k.ends_with("_updates")
                    || k == "budget.checkpoint_every"
                    || k.starts_with("eval.")
                    || matches!(k.as_str(), "moe.router" | "moe.topk" | "moe.gate_view"))
            })
            .collect();
        Sha256::digest(serde_json::to_vec(&flat).expect("config serializes")).into()
    }

    /// Applies every entry of a flat document on top of `self`, then validates.
    pub fn apply(&mut self, doc: &Value) -> Result<(), ConfigError> {
        let obj = doc.as_object().ok_or_else(|| ConfigError::Parse("top level must be an object".into()))?;
        // The router mode and k arrive as separate keys.
        let mut router = router_str(self.router).to_string();
        let mut topk = match self.router {
            RouterMode::TopK(k) => k,
            _ => 2,
        };
        for (key, entry) in obj {
            let v = match entry {
                Value::Object(m) if m.contains_key("value") => &m["value"],
                other => other,
            };
            match key.as_str() {
                "moe.router" => router = as_str(key, v)?.to_string(),
                "moe.topk" => topk = as_usize(key, v)?,
                _ => self.set(key, v)?,
            }
        }
        self.router = match router.as_str() {
            "soft" => RouterMode::Soft,
            "topk" => RouterMode::TopK(topk),
            "switch" => RouterMode::Switch,
            other => return Err(key_err("moe.router", format!("unknown router `{other}` (soft|topk|switch)"))),
        };
        self.validate()
    }

    pub fn from_json_str(text: &str, base: Config) -> Result<Self, ConfigError> {
        let doc: Value = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let mut cfg = base;
        cfg.apply(&doc)?;
        Ok(cfg)
    }

    /// Reads a config file on top of the published defaults.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_json_str(&std::fs::read_to_string(path)?, Config::default())
    }

    fn set(&mut self, key: &str, v: &Value) -> Result<(), ConfigError> {
        let f = || as_f64(key, v);
        let u = || as_usize(key, v);
        match key {
            "seed" => self.seed = as_u64(key, v)?,
            "objects.count" => self.object_count = u()?,
            "objects.train_count" => self.train_count = u()?,
            "objects.categories" => self.categories = as_usize_list(key, v)?,
            "env.num_envs" => self.num_envs = u()?,
            "env.dt" => self.env.dt = f()?,
            "env.kp" => self.env.kp = f()?,
            "env.qdot_max" => self.env.qdot_max = f()?,
            "env.grasp_scale" => self.env.grasp_scale = f()?,
            "env.lambda_jam" => self.env.lambda_jam = f()?,
            "env.lambda_drift" => self.env.lambda_drift = f()?,
            "env.v_drop" => self.env.v_drop = f()?,
            "env.drop_distance" => self.env.drop_distance = f()?,
            "env.episode_length" => self.env.episode_length = u()?,
            "env.hold_window" => self.env.hold_window = u()?,
            "env.reset_noise" => self.env.reset_noise = f()?,
            "reward.profile" => {
                self.reward_profile = as_str(key, v)?.parse().map_err(|e: String| key_err(key, e))?
            }
            "reward.c_success" => self.reward.c_success = f()?,
            "reward.c_dist" => self.reward.c_dist = f()?,
            "reward.c_rot" => self.reward.c_rot = f()?,
            "reward.c_omega" => self.reward.c_omega = f()?,
            "reward.omega_clip" => self.reward.omega_clip = f()?,
            "reward.c_action" => self.reward.c_action = f()?,
            "reward.epsilon" => self.reward.epsilon = f()?,
            "success.train_tau_theta" => self.train_thresholds.tau_theta = f()?,
            "success.eval_tau_theta" => self.eval_thresholds.tau_theta = f()?,
            "success.tau_q" => {
                self.train_thresholds.tau_q = f()?;
                self.eval_thresholds.tau_q = f()?;
            }
            "success.tau_v" => {
                self.train_thresholds.tau_v = f()?;
                self.eval_thresholds.tau_v = f()?;
            }
            "success.tau_omega" => {
                self.train_thresholds.tau_omega = f()?;
                self.eval_thresholds.tau_omega = f()?;
            }
            "ppo.clip" => self.ppo.clip = f()?,
            "ppo.gamma" => self.ppo.gamma = f()?,
            "ppo.lambda" => self.ppo.lambda = f()?,
            "ppo.lr" => self.ppo.lr = f()?,
            "ppo.kl_threshold" => self.ppo.kl_threshold = f()?,
            "ppo.lr_min" => self.ppo.lr_min = f()?,
            "ppo.lr_max" => self.ppo.lr_max = f()?,
            "ppo.minibatch_size" => self.ppo.minibatch_size = u()?,
            "ppo.epochs" => self.ppo.epochs = u()?,
            "ppo.entropy_coef" => self.ppo.entropy_coef = f()?,
            "ppo.value_coef" => self.ppo.value_coef = f()?,
            "ppo.max_grad_norm" => self.ppo.max_grad_norm = f()?,
            "ppo.horizon" => self.ppo.horizon = u()?,
            "ppo.reward_scale" => self.ppo.reward_scale = f()?,
            "policy.base_hidden" => self.arch.base_hidden = as_usize_list(key, v)?,
            "policy.mu_pc_hidden" => self.arch.mu_pc_hidden = as_usize_list(key, v)?,
            "policy.mu_e_hidden" => self.arch.mu_e_hidden = as_usize_list(key, v)?,
            "policy.gate_hidden" => self.arch.gate_hidden = u()?,
            "policy.phys_dim" => self.arch.phys_dim = u()?,
            "policy.init_log_std" => self.arch.init_log_std = f()?,
            "policy.output_gain" => self.arch.output_gain = f()?,
            "policy.smoothing_alpha" => self.smoothing_alpha = f()?,
            "moe.n_experts" => self.n_experts = u()?,
            "moe.gate_view" => self.gate_view = as_str(key, v)?.parse().map_err(|e: String| key_err(key, e))?,
            "budget.base_updates" => self.budget.base_updates = as_u64(key, v)?,
            "budget.expert_updates" => self.budget.expert_updates = as_u64(key, v)?,
            "budget.gate_updates" => self.budget.gate_updates = as_u64(key, v)?,
            "budget.checkpoint_every" => self.budget.checkpoint_every = as_u64(key, v)?,
            "budget.taxonomy_episodes" => self.budget.taxonomy_episodes = u()?,
            "eval.episodes" => self.eval_episodes = u()?,
            _ => return Err(key_err(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let check = |ok: bool, key: &str, msg: &str| if ok { Ok(()) } else { Err(key_err(key, msg)) };
        check(self.object_count >= 1, "objects.count", "must be at least 1")?;
        check(self.train_count <= self.object_count, "objects.train_count", "exceeds objects.count")?;
        check(!self.categories.is_empty(), "objects.categories", "must not be empty")?;
        check(self.categories.iter().all(|&c| c < NUM_CATEGORIES), "objects.categories", "categories are 0..6")?;
        check(self.num_envs >= 1, "env.num_envs", "must be at least 1")?;
        check(self.env.dt > 0.0, "env.dt", "must be positive")?;
        check(self.env.episode_length >= 1, "env.episode_length", "must be at least 1")?;
        check(self.env.hold_window >= 1, "env.hold_window", "must be at least 1")?;
        check(self.ppo.clip > 0.0, "ppo.clip", "must be positive")?;
        check(self.ppo.gamma > 0.0 && self.ppo.gamma <= 1.0, "ppo.gamma", "must lie in (0, 1]")?;
        check(self.ppo.lambda > 0.0 && self.ppo.lambda <= 1.0, "ppo.lambda", "must lie in (0, 1]")?;
        check(self.ppo.lr > 0.0, "ppo.lr", "must be positive")?;
        check(self.ppo.lr_min <= self.ppo.lr_max, "ppo.lr_min", "exceeds ppo.lr_max")?;
        check(self.ppo.minibatch_size >= 1, "ppo.minibatch_size", "must be at least 1")?;
        check(self.ppo.horizon >= 1, "ppo.horizon", "must be at least 1")?;
        check(
            self.arch.phys_dim == PHYS_DIM || self.arch.phys_dim == PHYS_DIM_PADDED,
            "policy.phys_dim",
            "must be 19 or 23",
        )?;
        check(!self.arch.base_hidden.is_empty(), "policy.base_hidden", "needs at least one layer")?;
        check((0.0..=1.0).contains(&self.smoothing_alpha), "policy.smoothing_alpha", "must lie in [0, 1]")?;
        check([1, 4, 6, 8].contains(&self.n_experts), "moe.n_experts", "must be 1, 4, 6 or 8")?;
        if let RouterMode::TopK(k) = self.router {
            check(k >= 1 && k <= self.n_experts, "moe.topk", "must lie in 1..=n_experts")?;
        }
        check(self.eval_episodes >= 1, "eval.episodes", "must be at least 1")?;
        check(self.budget.taxonomy_episodes >= 1, "budget.taxonomy_episodes", "must be at least 1")?;
        Ok(())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn as_f64(key: &str, v: &Value) -> Result<f64, ConfigError> {
    v.as_f64().filter(|x| x.is_finite()).ok_or_else(|| key_err(key, format!("expected a number, got {v}")))
}

fn as_u64(key: &str, v: &Value) -> Result<u64, ConfigError> {
    v.as_u64().ok_or_else(|| key_err(key, format!("expected a non-negative integer, got {v}")))
}

fn as_usize(key: &str, v: &Value) -> Result<usize, ConfigError> {
    as_u64(key, v).map(|x| x as usize)
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str, ConfigError> {
    v.as_str().ok_or_else(|| key_err(key, format!("expected a string, got {v}")))
}

fn as_usize_list(key: &str, v: &Value) -> Result<Vec<usize>, ConfigError> {
    v.as_array()
        .ok_or_else(|| key_err(key, format!("expected a list of integers, got {v}")))?
        .iter()
        .map(|x| as_usize(key, x))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn document_round_trips() {
        let mut c = Config::desk();
        c.router = RouterMode::TopK(3);
        c.seed = 99;
        let doc = c.to_document();
        let back = Config::from_json_str(&doc.to_string(), Config::default()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn published_values_are_defaults() {
        let c = Config::default();
        assert_eq!(c.ppo.lr, 5e-3);
        assert_eq!(c.ppo.clip, 0.2);
        assert_eq!(c.ppo.horizon, 8);
        assert_eq!(c.reward.c_rot, -1.0);
        assert_eq!(c.effective_reward().c_rot, 1.0);
        assert_eq!(c.train_thresholds.tau_theta, 0.4);
        assert_eq!(c.eval_thresholds.tau_theta, 0.1);
        assert_eq!(provenance("ppo.clip"), "paper");
        assert_eq!(provenance("budget.base_updates"), "invented");
    }

    #[test]
    fn errors_name_the_key() {
        let e = Config::from_json_str(r#"{"ppo.gamma": 1.5}"#, Config::default()).unwrap_err();
        assert!(e.to_string().contains("ppo.gamma"), "{e}");
        let e = Config::from_json_str(r#"{"ppo.nope": 1}"#, Config::default()).unwrap_err();
        assert!(e.to_string().contains("ppo.nope"));
        let e = Config::from_json_str(r#"{"seed": "x"}"#, Config::default()).unwrap_err();
        assert!(e.to_string().contains("seed"));
        let e = Config::from_json_str(r#"{"moe.router": "topk", "moe.topk": 9}"#, Config::default()).unwrap_err();
        assert!(e.to_string().contains("moe.topk"));
    }

    #[test]
    fn bare_and_wrapped_values() {
        let c = Config::from_json_str(r#"{"seed": 5, "ppo.lr": {"value": 0.001, "provenance": "x"}}"#, Config::default())
            .unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.ppo.lr, 0.001);
    }
}
