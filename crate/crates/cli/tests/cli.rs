use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn tiny_config(dir: &Path, seed: Option<u64>) -> PathBuf {
    let mut doc = json!({
        "objects.count": 36,
        "objects.train_count": 24,
        "env.num_envs": 4,
        "env.episode_length": 40,
        "ppo.horizon": 4,
        "ppo.minibatch_size": 8,
        "ppo.epochs": 2,
        "policy.base_hidden": [12, 12],
        "policy.mu_pc_hidden": [8],
        "policy.mu_e_hidden": [12],
        "policy.gate_hidden": 6,
        "policy.init_log_std": -1.0,
        "budget.base_updates": 3,
        "budget.expert_updates": 2,
        "budget.gate_updates": 2,
        "budget.checkpoint_every": 0,
        "eval.episodes": 1
    });
    if let Some(s) = seed {
        doc["seed"] = json!(s);
    }
    let p = dir.join("tiny.json");
    std::fs::write(&p, serde_json::to_string_pretty(&doc).unwrap()).unwrap();
    p
}

fn dexmoe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dexmoe")).args(args).env("RUST_LOG", "warn").env_remove("DEXMOE_SEED").output().unwrap()
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn missing_config_is_a_usage_error() {
    let out = dexmoe(&["train-base", "--out", "unused"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = dexmoe(&["eval", "--config", "x.json", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn invalid_config_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"moe.n_experts": 5}"#).unwrap();
    let out = dexmoe(&["gen-objects", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("moe.n_experts"));

    std::fs::write(&cfg, r#"{"ppo.learning_rate": 0.1}"#).unwrap();
    let out = dexmoe(&["gen-objects", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ppo.learning_rate"));
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_config(d, Some(3));
    let cfg_bytes = std::fs::read(&cfg).unwrap();

    ok(dexmoe(&["gen-objects", "--config", s(&cfg), "--out", s(&d.join("objects"))]));
    let objects = d.join("objects/objects.bin");
    let objects_bytes = std::fs::read(&objects).unwrap();
    let common = |out: &str| -> Vec<String> {
        ["--config", s(&cfg), "--objects", s(&objects), "--workers", "2", "--out", s(&d.join(out))]
            .iter()
            .map(|x| x.to_string())
            .collect()
    };
    let run = |cmd: &str, out: &str, extra: &[&str]| {
        let mut a = vec![cmd.to_string()];
        a.extend(common(out));
        a.extend(extra.iter().map(|x| x.to_string()));
        dexmoe(&a.iter().map(String::as_str).collect::<Vec<_>>())
    };

    ok(run("train-base", "base", &[]));
    let base = d.join("base/base.ckpt");
    ok(run("train-experts", "experts", &["--from-checkpoint", s(&base)]));
    let experts = d.join("experts/experts.ckpt");
    ok(run("train-gate", "gate", &["--from-checkpoint", s(&experts)]));
    let gate = d.join("gate/gate.ckpt");
    assert!(gate.exists());
    let audits = read_json(&d.join("experts/audits.json"));
    assert_eq!(audits.as_array().unwrap().len(), 5);

    ok(run("eval", "eval", &["--from-checkpoint", s(&gate), "--split", "ood", "--log-trajectories"]));
    let summary = read_json(&d.join("eval/summary.json"));
    for k in ["S_min", "S5_minus", "S_mean", "S5_plus", "S_max"] {
        assert!(summary[k].is_number(), "{k} missing");
    }
    assert_eq!(summary["split"], "ood");
    let csv = std::fs::read_to_string(d.join("eval/objects.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "object_id,category,episodes,S_mean,S_std,S_best");
    assert_eq!(csv.lines().count(), 1 + 12);

    let rc = ok(dexmoe(&["recount", "--log", s(&d.join("eval/trajectories.bin")), "--out", s(&d.join("recount"))]));
    assert!(String::from_utf8_lossy(&rc.stdout).contains("12 episodes, 0 mismatches"));

    ok(run("export-gates", "gates", &["--from-checkpoint", s(&gate), "--split", "train"]));
    let gates = std::fs::read_to_string(d.join("gates/gates.csv")).unwrap();
    assert_eq!(gates.lines().next().unwrap(), "object_id,w_1,w_2,w_3,w_4");
    assert_eq!(gates.lines().count(), 1 + 24);
    let proj = std::fs::read_to_string(d.join("gates/projection.csv")).unwrap();
    assert_eq!(proj.lines().next().unwrap(), "object_id,x,y");

    // A non-gate checkpoint has no gate weights to export.
    let out = run("export-gates", "gates2", &["--from-checkpoint", s(&base)]);
    assert_eq!(out.status.code(), Some(1));

    // Routing overrides at evaluation time.
    ok(run("eval", "eval-switch", &["--from-checkpoint", s(&gate), "--router", "switch"]));
    let out = run("eval", "eval-bad", &["--from-checkpoint", s(&gate), "--router", "topk", "--topk", "9"]);
    assert_eq!(out.status.code(), Some(2));

    let m = read_json(&d.join("gate/manifest.json"));
    assert_eq!(m["command"], "train-gate");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["seed_source"], "config");
    assert!(m["inputs"].as_object().unwrap().contains_key(s(&experts)));
    assert_eq!(m["config"]["ppo.horizon"]["value"], 4);

    assert_eq!(std::fs::read(&cfg).unwrap(), cfg_bytes);
    assert_eq!(std::fs::read(&objects).unwrap(), objects_bytes);
}

#[test]
fn training_output_is_independent_of_workers() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_config(d, Some(9));
    let train = |out: &str, workers: &str| {
        ok(dexmoe(&["train-base", "--config", s(&cfg), "--workers", workers, "--out", s(&d.join(out))]));
        std::fs::read(d.join(out).join("base.ckpt")).unwrap()
    };
    let a = train("a", "1");
    assert_eq!(a, train("b", "1"));
    assert_eq!(a, train("c", "4"));
}

#[test]
fn seed_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let no_seed = tiny_config(d, None);
    let run = |args: &[&str], env_seed: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_dexmoe"));
        c.args(args).env("RUST_LOG", "warn").env_remove("DEXMOE_SEED");
        if let Some(v) = env_seed {
            c.env("DEXMOE_SEED", v);
        }
        ok(c.output().unwrap());
        read_json(&d.join("o/manifest.json"))
    };
    let m = run(&["gen-objects", "--config", s(&no_seed), "--out", s(&d.join("o"))], Some("77"));
    assert_eq!((m["seed"].as_u64(), m["seed_source"].as_str()), (Some(77), Some("env")));
    let m = run(&["gen-objects", "--config", s(&no_seed), "--seed", "5", "--out", s(&d.join("o"))], Some("77"));
    assert_eq!((m["seed"].as_u64(), m["seed_source"].as_str()), (Some(5), Some("flag")));
    let with_seed = tiny_config(d, Some(4));
    let m = run(&["gen-objects", "--config", s(&with_seed), "--out", s(&d.join("o"))], Some("77"));
    assert_eq!((m["seed"].as_u64(), m["seed_source"].as_str()), (Some(4), Some("config")));
}
