use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use dexmoe_core::env::{
    generate_objects_with, read_object_file, read_trajectory_log, recount, split_objects, write_object_file,
    write_trajectory_log, ObjectSpec, Split, WorkerPool,
};
use dexmoe_core::eval::{
    export_gate_weights, project_2d, run_ablation, run_eval_suite_with, write_gate_csv, write_projection_csv, write_report,
    AblationPreset, EvalSuite,
};
use dexmoe_core::io::write_atomic;
use dexmoe_core::pipeline::{hex, load_ensemble, Checkpoint, Config, ConfigError, Pipeline, Stage, TrainState};
use dexmoe_core::policy::{PolicyMode, RouterMode};

const SEED_ENV: &str = "DEXMOE_SEED";

#[derive(Parser, Debug)]
#[command(name = "dexmoe", version, about = "Train and evaluate mixture-of-experts in-hand reorientation policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat JSON config with dotted keys.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory; nothing is written outside it.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Parallel workers for environments and evaluation. Defaults to the number of cores.
    #[arg(long, value_name = "N", value_parser = clap::value_parser!(u64).range(1..))]
    workers: Option<u64>,
    /// Object set file written by `gen-objects`. Regenerated from the config when absent.
    #[arg(long, value_name = "PATH")]
    objects: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct RouterArgs {
    /// Gate routing rule; overrides the config.
    #[arg(long, value_parser = ["soft", "topk", "switch"])]
    router: Option<String>,
    /// Experts kept by top-k routing.
    #[arg(long, value_name = "K", value_parser = clap::value_parser!(u64).range(1..))]
    topk: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the procedural object set.
    GenObjects {
        #[command(flatten)]
        common: Common,
    },
    /// Train the encoders and base policy on all training objects.
    TrainBase {
        #[command(flatten)]
        common: Common,
        /// Resume an interrupted base run.
        #[arg(long, value_name = "PATH")]
        from_checkpoint: Option<PathBuf>,
    },
    /// Fine-tune one expert per taxonomy slot from a base checkpoint.
    TrainExperts {
        #[command(flatten)]
        common: Common,
        /// Checkpoint saved after base training.
        #[arg(long, value_name = "PATH")]
        from_checkpoint: PathBuf,
    },
    /// Train the gate over frozen experts.
    TrainGate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint saved after expert training.
        #[arg(long, value_name = "PATH")]
        from_checkpoint: PathBuf,
        #[command(flatten)]
        routing: RouterArgs,
    },
    /// Evaluate a checkpoint with deterministic actions.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate, from any stage.
        #[arg(long, value_name = "PATH")]
        from_checkpoint: PathBuf,
        /// Object split to evaluate on.
        #[arg(long, default_value = "ood", value_parser = ["train", "ood"])]
        split: String,
        /// Episodes per object; defaults to the config.
        #[arg(long, value_name = "N", value_parser = clap::value_parser!(u64).range(1..))]
        episodes: Option<u64>,
        #[command(flatten)]
        routing: RouterArgs,
        /// Also write every episode to trajectories.bin for `recount`.
        #[arg(long)]
        log_trajectories: bool,
    },
    /// Train and evaluate one ablation sweep.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Which sweep to run.
        #[arg(long, value_name = "NAME", value_parser = ["expert-count", "gate-inputs", "router"])]
        preset: String,
        /// Object split to evaluate on.
        #[arg(long, default_value = "ood", value_parser = ["train", "ood"])]
        split: String,
        /// Episodes per object; defaults to the config.
        #[arg(long, value_name = "N", value_parser = clap::value_parser!(u64).range(1..))]
        episodes: Option<u64>,
    },
    /// Per-object mean gate weights and their 2-D projection.
    ExportGates {
        #[command(flatten)]
        common: Common,
        /// Checkpoint saved after gate training.
        #[arg(long, value_name = "PATH")]
        from_checkpoint: PathBuf,
        /// Object split to evaluate on.
        #[arg(long, default_value = "ood", value_parser = ["train", "ood"])]
        split: String,
        /// Episodes per object; defaults to the config.
        #[arg(long, value_name = "N", value_parser = clap::value_parser!(u64).range(1..))]
        episodes: Option<u64>,
    },
    /// Recount successes offline from a trajectory log and compare with the online counts.
    Recount {
        /// Trajectory log written by `eval --log-trajectories`.
        #[arg(long, value_name = "PATH")]
        log: PathBuf,
        /// Output directory for recount.csv.
        #[arg(long, value_name = "DIR", default_value = "out")]
        out: PathBuf,
    },
}

/// Failures that map to exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Everything resolved from the common flags before any work starts.
struct Setup {
    cfg: Config,
    seed_source: &'static str,
    workers: usize,
    out: PathBuf,
    inputs: BTreeMap<String, String>,
    objects: Vec<ObjectSpec>,
}

fn parse_split(s: &str) -> Split {
    s.parse().expect("clap restricts the value")
}

fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex(&Sha256::digest(bytes)))
}

fn load_config(common: &Common) -> anyhow::Result<(Config, &'static str)> {
    let text = std::fs::read_to_string(&common.config)
        .map_err(|e| UsageError(format!("cannot read config {}: {e}", common.config.display())))?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| UsageError(format!("config {}: {e}", common.config.display())))?;
    let mut cfg = Config::default();
    cfg.apply(&doc).map_err(|e| match e {
        ConfigError::Key { .. } | ConfigError::Parse(_) => UsageError(format!("{}: {e}", common.config.display())),
        ConfigError::Io(e) => UsageError(e.to_string()),
    })?;
    let source = if let Some(s) = common.seed {
        cfg.seed = s;
        "flag"
    } else if doc.get("seed").is_some() {
        "config"
    } else if let Ok(v) = std::env::var(SEED_ENV) {
        cfg.seed = v.trim().parse().map_err(|_| UsageError(format!("{SEED_ENV}=`{v}` is not a u64")))?;
        "env"
    } else {
        "default"
    };
    Ok((cfg, source))
}

fn apply_routing(cfg: &mut Config, r: &RouterArgs) -> anyhow::Result<()> {
    let k = r.topk.map(|k| k as usize);
    let router = match (r.router.as_deref(), k) {
        (None, None) => return Ok(()),
        (Some("soft"), None) => RouterMode::Soft,
        (Some("switch"), None) => RouterMode::Switch,
        (Some("topk"), Some(k)) => RouterMode::TopK(k),
        (Some("topk"), None) => match cfg.router {
            RouterMode::TopK(k) => RouterMode::TopK(k),
            _ => RouterMode::TopK(2),
        },
        (None, Some(k)) if matches!(cfg.router, RouterMode::TopK(_)) => RouterMode::TopK(k),
        (_, Some(_)) => return Err(UsageError("--topk only applies with --router topk".into()).into()),
        (Some(other), _) => unreachable!("clap restricts --router, got {other}"),
    };
    if let RouterMode::TopK(k) = router {
        if k > cfg.n_experts {
            return Err(UsageError(format!("--topk {k} exceeds moe.n_experts = {}", cfg.n_experts)).into());
        }
    }
    cfg.router = router;
    Ok(())
}

fn setup(common: &Common, routing: Option<&RouterArgs>) -> anyhow::Result<Setup> {
    let (mut cfg, seed_source) = load_config(common)?;
    if let Some(r) = routing {
        apply_routing(&mut cfg, r)?;
    }
    let workers = match common.workers {
        Some(n) => n as usize,
        None => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    };
    let mut inputs = BTreeMap::new();
    inputs.insert(common.config.display().to_string(), sha256_file(&common.config)?);
    let objects = match &common.objects {
        Some(p) => {
            inputs.insert(p.display().to_string(), sha256_file(p)?);
            let objs = read_object_file(p).with_context(|| format!("reading objects {}", p.display()))?;
            if objs.len() != cfg.object_count {
                bail!("object file holds {} objects, config expects objects.count = {}", objs.len(), cfg.object_count);
            }
            objs
        }
        None => generate_objects_with(cfg.object_count, cfg.seed, &cfg.categories)?,
    };
    Ok(Setup { cfg, seed_source, workers, out: common.out.clone(), inputs, objects })
}

fn write_manifest(
    out: &Path,
    command: &str,
    cfg: Option<&Config>,
    seed_source: &str,
    inputs: &BTreeMap<String, String>,
    extra: Value,
) -> anyhow::Result<()> {
    let mut m = json!({
        "command": command,
        "versions": {
            "dexmoe": env!("CARGO_PKG_VERSION"),
            "checkpoint_format": dexmoe_core::pipeline::VERSION,
        },
        "inputs": inputs,
        "options": extra,
    });
    if let Some(cfg) = cfg {
        m["seed"] = json!(cfg.seed);
        m["seed_source"] = json!(seed_source);
        m["config_hash"] = json!(cfg.hash_hex());
        m["config"] = cfg.to_document();
    }
    let text = serde_json::to_string_pretty(&m)?;
    write_atomic(&out.join("manifest.json"), text.as_bytes()).with_context(|| format!("writing manifest in {}", out.display()))?;
    Ok(())
}

fn begin(s: &Setup, command: &str, extra: Value) -> anyhow::Result<WorkerPool> {
    write_manifest(&s.out, command, Some(&s.cfg), s.seed_source, &s.inputs, extra)?;
    log::info!("{command}: seed {} ({}), {} workers, output in {}", s.cfg.seed, s.seed_source, s.workers, s.out.display());
    Ok(WorkerPool::new(s.workers))
}

/// Loads a training state for `pipe`, recording the checkpoint as an input.
fn load_state(pipe: &Pipeline, path: &Path, inputs: &mut BTreeMap<String, String>) -> anyhow::Result<TrainState> {
    inputs.insert(path.display().to_string(), sha256_file(path)?);
    pipe.load(path).with_context(|| format!("loading {}", path.display()))
}

fn train(
    common: &Common,
    routing: Option<&RouterArgs>,
    command: &str,
    from: Option<&Path>,
    stage: Stage,
) -> anyhow::Result<()> {
    let mut s = setup(common, routing)?;
    let train_objects = split_objects(&s.objects, Split::Train, s.cfg.train_count);
    // The pool is only borrowed by the pipeline, so build it first.
    let pool = WorkerPool::new(s.workers);
    let pipe = Pipeline::new(s.cfg.clone(), train_objects, &pool, Some(s.out.clone()));
    let mut state = match from {
        Some(p) => load_state(&pipe, p, &mut s.inputs)?,
        None => pipe.init_state()?,
    };
    write_manifest(&s.out, command, Some(&s.cfg), s.seed_source, &s.inputs, json!({ "stage": stage }))?;
    log::info!("{command}: seed {} ({}), {} workers, output in {}", s.cfg.seed, s.seed_source, s.workers, s.out.display());
    match stage {
        Stage::Base => pipe.train_base(&mut state)?,
        Stage::Experts => pipe.train_experts(&mut state)?,
        Stage::Gate => pipe.train_gate(&mut state)?,
        Stage::Init => unreachable!(),
    }
    for a in &state.audits {
        if a.violations > 0 || !a.frozen_unchanged() {
            bail!("audit failed for slot {}: {} foreign samples, frozen unchanged = {}", a.slot, a.violations, a.frozen_unchanged());
        }
    }
    let audits = serde_json::to_string_pretty(&state.audits)?;
    write_atomic(&s.out.join("audits.json"), audits.as_bytes())?;
    log::info!("wrote {}", s.out.join(format!("{stage}.ckpt")).display());
    Ok(())
}

/// Reads a checkpoint for evaluation. Any stage loads; the policy evaluated is
/// the MoE once experts exist and the base policy before.
fn eval_policy(path: &Path, inputs: &mut BTreeMap<String, String>) -> anyhow::Result<(Checkpoint, PolicyMode)> {
    inputs.insert(path.display().to_string(), sha256_file(path)?);
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let mode = match ck.stage {
        Stage::Init | Stage::Base => PolicyMode::Base,
        Stage::Experts => {
            log::warn!("checkpoint stage is experts; the gate is untrained");
            PolicyMode::Moe
        }
        Stage::Gate => PolicyMode::Moe,
    };
    Ok((ck, mode))
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::GenObjects { common } => {
            let s = setup(&common, None)?;
            begin(&s, "gen-objects", json!({}))?;
            let path = s.out.join("objects.bin");
            write_object_file(&path, &s.objects)?;
            let mut csv = String::from("object_id,category,split\n");
            for o in &s.objects {
                let split = if o.id < s.cfg.train_count { "train" } else { "ood" };
                csv.push_str(&format!("{},{},{split}\n", o.id, o.category));
            }
            write_atomic(&s.out.join("objects.csv"), csv.as_bytes())?;
            log::info!("wrote {} objects to {}", s.objects.len(), path.display());
        }
        Command::TrainBase { common, from_checkpoint } => {
            train(&common, None, "train-base", from_checkpoint.as_deref(), Stage::Base)?;
        }
        Command::TrainExperts { common, from_checkpoint } => {
            train(&common, None, "train-experts", Some(&from_checkpoint), Stage::Experts)?;
        }
        Command::TrainGate { common, from_checkpoint, routing } => {
            train(&common, Some(&routing), "train-gate", Some(&from_checkpoint), Stage::Gate)?;
        }
        Command::Eval { common, from_checkpoint, split, episodes, routing, log_trajectories } => {
            let mut s = setup(&common, None)?;
            let (ck, mode) = eval_policy(&from_checkpoint, &mut s.inputs)?;
            let mut ens = load_ensemble(&ck)?;
            let routed = routing.router.is_some() || routing.topk.is_some();
            if routed {
                let mut c = Config { router: ens.router, n_experts: ens.n_experts(), ..s.cfg.clone() };
                apply_routing(&mut c, &routing)?;
                ens.set_router(c.router).map_err(|e| UsageError(e.to_string()))?;
            }
            let split = parse_split(&split);
            let episodes = episodes.map_or(s.cfg.eval_episodes, |e| e as usize);
            let pool = begin(
                &s,
                "eval",
                json!({ "split": split, "episodes": episodes, "router": ens.router.to_string(), "stage": ck.stage }),
            )?;
            let suite = EvalSuite { split, train_count: s.cfg.train_count, episodes, seed: s.cfg.seed, log_trajectories };
            let (report, logs) = run_eval_suite_with(
                &ens,
                mode,
                &s.objects,
                &suite,
                &s.cfg.eval_env_params(),
                s.cfg.smoothing_alpha,
                &s.cfg.hash_hex(),
                &pool,
            )?;
            write_report(&s.out, &report)?;
            if log_trajectories {
                write_trajectory_log(&s.out.join("trajectories.bin"), &logs)?;
            }
            let m = &report.summary;
            println!(
                "{} {}: S_min {:.3}  S5- {:.3}  S_mean {:.3}  S5+ {:.3}  S_max {:.3}",
                report.policy, split, m.s_min, m.s5_minus, m.s_mean, m.s5_plus, m.s_max
            );
        }
        Command::Ablate { common, preset, split, episodes } => {
            let mut s = setup(&common, None)?;
            let preset: AblationPreset = preset.parse().map_err(UsageError)?;
            if let Some(e) = episodes {
                s.cfg.eval_episodes = e as usize;
            }
            let split = parse_split(&split);
            let pool = begin(&s, "ablate", json!({ "preset": preset, "split": split }))?;
            let report = run_ablation(preset, &s.cfg, &s.objects, split, &pool, Some(&s.out))?;
            for r in &report.rows {
                match &r.summary {
                    Some(m) => println!("{:<16} S_min {:.3}  S_mean {:.3}  S_max {:.3}", r.variant.name, m.s_min, m.s_mean, m.s_max),
                    None => println!("{:<16} failed: {}", r.variant.name, r.error.as_deref().unwrap_or("")),
                }
            }
            if report.partial {
                bail!("some ablation variants failed; see ablation.csv");
            }
        }
        Command::ExportGates { common, from_checkpoint, split, episodes } => {
            let mut s = setup(&common, None)?;
            let (ck, _) = eval_policy(&from_checkpoint, &mut s.inputs)?;
            if ck.stage != Stage::Gate {
                bail!("gate export needs a gate checkpoint, {} is at stage {}", from_checkpoint.display(), ck.stage);
            }
            let ens = load_ensemble(&ck)?;
            let split = parse_split(&split);
            let episodes = episodes.map_or(s.cfg.eval_episodes, |e| e as usize);
            let pool = begin(&s, "export-gates", json!({ "split": split, "episodes": episodes }))?;
            let objs = split_objects(&s.objects, split, s.cfg.train_count);
            let trace = export_gate_weights(
                &ens,
                &objs,
                &s.cfg.eval_env_params(),
                s.cfg.smoothing_alpha,
                episodes,
                s.cfg.seed,
                &pool,
            )?;
            write_gate_csv(&s.out.join("gates.csv"), &trace)?;
            let vectors: Vec<Vec<f64>> = trace.rows.iter().map(|r| r.mean.clone()).collect();
            let ids: Vec<usize> = trace.rows.iter().map(|r| r.object_id).collect();
            let proj = project_2d(&vectors)?;
            write_projection_csv(&s.out.join("projection.csv"), &ids, &proj)?;
            log::info!("wrote gates.csv and projection.csv for {} objects", ids.len());
        }
        Command::Recount { log, out } => {
            let mut inputs = BTreeMap::new();
            inputs.insert(log.display().to_string(), sha256_file(&log)?);
            write_manifest(&out, "recount", None, "", &inputs, json!({}))?;
            let logs = read_trajectory_log(&log).with_context(|| format!("reading {}", log.display()))?;
            let mut csv = String::from("object_id,episode,online,recount,match\n");
            let mut per_object: BTreeMap<u64, u32> = BTreeMap::new();
            let mut mismatches = 0;
            for l in &logs {
                let ep = per_object.entry(l.object_id).or_default();
                let offline = recount(l);
                let ok = offline == l.online_successes;
                mismatches += usize::from(!ok);
                csv.push_str(&format!("{},{},{},{},{}\n", l.object_id, ep, l.online_successes, offline, ok));
                *ep += 1;
            }
            write_atomic(&out.join("recount.csv"), csv.as_bytes())?;
            println!("{} episodes, {} mismatches", logs.len(), mismatches);
            if mismatches > 0 {
                bail!("{mismatches} episodes disagree with the online success count");
            }
        }
    }
    Ok(())
}
