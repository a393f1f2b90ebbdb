use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::metrics::Summary;
use super::run::{run_eval_suite, write_report};
use super::EvalError;
use crate::env::{split_objects, ObjectSpec, Split, WorkerPool};
use crate::io::write_atomic;
use crate::pipeline::{Config, Pipeline, PipelineError, TrainState};
use crate::policy::{GateView, PolicyMode, RouterMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationPreset {
    /// 1, 4, 6 and 8 experts.
    ExpertCount,
    /// Gate fed the full shape descriptor, the point-cloud part, or the category.
    GateInputs,
    /// Soft, top-2 and switch routing.
    Router,
}

impl FromStr for AblationPreset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "expert-count" => Ok(Self::ExpertCount),
            "gate-inputs" => Ok(Self::GateInputs),
            "router" => Ok(Self::Router),
            other => Err(format!("unknown preset `{other}` (expert-count|gate-inputs|router)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub n_experts: usize,
    pub gate_view: GateView,
    pub router: RouterMode,
}

impl AblationPreset {
    /// Variants derived from `cfg`, which supplies every setting not swept.
    pub fn variants(self, cfg: &Config) -> Vec<Variant> {
        let v = |name: String, n_experts, gate_view, router| Variant { name, n_experts, gate_view, router };
        match self {
            Self::ExpertCount => [1, 4, 6, 8]
                .into_iter()
                .map(|n| {
                    let router = match cfg.router {
                        RouterMode::TopK(k) if k > n => RouterMode::TopK(n),
                        r => r,
                    };
                    v(format!("experts-{n}"), n, cfg.gate_view, router)
                })
                .collect(),
            Self::GateInputs => GateView::ALL
                .into_iter()
                .map(|g| v(format!("gate-{g}"), cfg.n_experts, g, cfg.router))
                .collect(),
            Self::Router => [RouterMode::Soft, RouterMode::TopK(2.min(cfg.n_experts)), RouterMode::Switch]
                .into_iter()
                .map(|r| v(format!("router-{r}"), cfg.n_experts, cfg.gate_view, r))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub summary: Option<Summary>,
    /// Why the variant has no result.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub preset: AblationPreset,
    pub split: Split,
    pub rows: Vec<AblationRow>,
    /// Set when any variant failed to produce a result.
    pub partial: bool,
}

/// Trains and evaluates every variant of `preset` from the same seed and
/// budgets. The base stage is shared by all variants and the expert stage by
/// all variants with the same expert count, since neither depends on the gate.
pub fn run_ablation(
    preset: AblationPreset,
    cfg: &Config,
    objects: &[ObjectSpec],
    split: Split,
    pool: &WorkerPool,
    out: Option<&Path>,
) -> Result<AblationReport, PipelineError> {
    let train = split_objects(objects, Split::Train, cfg.train_count);
    let base_pipe = Pipeline::new(cfg.clone(), train.clone(), pool, out.map(|d| d.join("base")));
    let mut base = base_pipe.init_state()?;
    base_pipe.train_base(&mut base)?;

    let mut experts: BTreeMap<usize, Result<TrainState, String>> = BTreeMap::new();
    let mut rows = Vec::new();
    for v in preset.variants(cfg) {
        let vcfg = Config { n_experts: v.n_experts, gate_view: v.gate_view, router: v.router, ..cfg.clone() };
        let dir = out.map(|d| d.join(&v.name));
        let pipe = Pipeline::new(vcfg.clone(), train.clone(), pool, dir.clone());
        let trained = experts.entry(v.n_experts).or_insert_with(|| {
            let mut s = base.clone();
            pipe.train_experts(&mut s).map(|_| s).map_err(|e| e.to_string())
        });
        let result = trained.clone().and_then(|mut s| {
            s.ensemble.reset_gate(v.gate_view, vcfg.seed).map_err(|e| e.to_string())?;
            pipe.train_gate(&mut s).map_err(|e| e.to_string())?;
            let report = run_eval_suite(
                &s.ensemble,
                PolicyMode::Moe,
                objects,
                split,
                vcfg.train_count,
                &vcfg.eval_env_params(),
                vcfg.smoothing_alpha,
                vcfg.eval_episodes,
                vcfg.seed,
                &vcfg.hash_hex(),
                pool,
            )
            .map_err(|e| e.to_string())?;
            if let Some(d) = &dir {
                write_report(&d.join("eval"), &report).map_err(|e| e.to_string())?;
            }
            Ok(report.summary)
        });
        if let Err(e) = &result {
            log::warn!("ablation variant {} failed: {e}", v.name);
        }
        rows.push(AblationRow { variant: v, summary: result.as_ref().ok().copied(), error: result.err() });
    }
    let report = AblationReport { preset, split, partial: rows.iter().any(|r| r.error.is_some()), rows };
    if let Some(d) = out {
        write_ablation(d, &report)?;
    }
    Ok(report)
}

/// `ablation.csv` side by side plus `ablation.json`.
pub fn write_ablation(dir: &Path, report: &AblationReport) -> Result<(), EvalError> {
    let mut s = String::from("variant,n_experts,gate_view,router,S_min,S5_minus,S_mean,S5_plus,S_max,status\n");
    for r in &report.rows {
        let v = &r.variant;
        let cells = match &r.summary {
            Some(m) => format!("{},{},{},{},{},ok", m.s_min, m.s5_minus, m.s_mean, m.s5_plus, m.s_max),
            None => format!(",,,,,failed: {}", r.error.as_deref().unwrap_or("").replace([',', '\n'], ";")),
        };
        s.push_str(&format!("{},{},{},{},{cells}\n", v.name, v.n_experts, v.gate_view, v.router));
    }
    write_atomic(&dir.join("ablation.csv"), s.as_bytes())?;
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    write_atomic(&dir.join("ablation.json"), json.as_bytes())?;
    Ok(())
}
