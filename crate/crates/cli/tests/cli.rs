use std::path::Path;

use clap::Parser;
use geogrouse::{ParamStore, RunConfig};
use geogrouse_cli::{resolve_config, run, Cli};

const SMALL: &str = r#"
[env]
n_items = 40
candidates = 6
n_users = 60
aoi4_per_group = 2
aoi5_per_aoi4 = 2
cells_per_aoi5 = 2
session_len = 3

[train]
batch_size = 10
em_rounds = 2
m_steps_per_round = 2
init_sample = 64

[eval]
seeds = [1, 2]
sessions_per_seed = 40
"#;

fn cli(args: &[&str]) -> Cli {
    Cli::try_parse_from(std::iter::once("geogrouse").chain(args.iter().copied())).unwrap()
}

fn run_ok(args: &[&str]) -> String {
    let mut out = Vec::new();
    run(&cli(args), &mut out).unwrap_or_else(|e| panic!("{args:?}: {e}"));
    String::from_utf8(out).unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn resolved_config_reparses_to_the_same_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), SMALL);
    let out = dir.path().join("o");
    let c = cli(&["--config", &cfg_path, "--seed", "5", "--variant", "proto", "--out", out.to_str().unwrap(), "train"]);
    let resolved = resolve_config(&c).unwrap();
    assert_eq!(resolved.train.seed, 5);
    assert_eq!(resolved.env.seed, 5);
    assert_eq!(resolved.model.gs_variant, geogrouse::GsVariant::Proto);
    let text = resolved.to_toml().unwrap();
    assert_eq!(RunConfig::from_toml(&text).unwrap(), resolved);
}

#[test]
fn bad_config_exits_with_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), "[train]\nbatch = 3\n");
    let err = run(&cli(&["--config", &cfg_path, "train"]), &mut Vec::new()).unwrap_err();
    assert_eq!(err.code, 1);
    assert!(err.message.contains("train.batch"), "{}", err.message);

    let missing = dir.path().join("nope");
    let err = run(
        &cli(&["--config", &cfg_path.replace("run.toml", "absent.toml"), "train"]),
        &mut Vec::new(),
    )
    .unwrap_err();
    assert_eq!(err.code, 1);
    let cfg_ok = write_config(dir.path(), SMALL);
    let err = run(
        &cli(&["--config", &cfg_ok, "--out", missing.to_str().unwrap(), "eval"]),
        &mut Vec::new(),
    )
    .unwrap_err();
    assert_eq!(err.code, 1);
    assert!(err.message.contains("checkpoint not found"));
}

#[test]
fn grad_check_passes_on_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), SMALL);
    let out = dir.path().join("g");
    for variant in ["kmeans", "proto", "can", "din"] {
        let text = run_ok(&["--config", &cfg_path, "--variant", variant, "--out", out.to_str().unwrap(), "grad-check"]);
        assert!(text.contains("max relative error"), "{text}");
    }
    let err = run(
        &cli(&["--config", &cfg_path, "--out", out.to_str().unwrap(), "grad-check", "--tolerance", "0"]),
        &mut Vec::new(),
    )
    .unwrap_err();
    assert_eq!(err.code, 2);
}

#[test]
fn zero_round_training_writes_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &SMALL.replace("em_rounds = 2", "em_rounds = 0"));
    let out = dir.path().join("t");
    let text = run_ok(&["--config", &cfg_path, "--out", out.to_str().unwrap(), "train"]);
    assert!(text.contains("# resolved config (seed 1)"));
    let saved = ParamStore::load(&out.join("checkpoint.json")).unwrap();
    let cfg = RunConfig::from_toml(&std::fs::read_to_string(&cfg_path).unwrap()).unwrap();
    let env = geogrouse::simulator::generate_environment(&cfg.env).unwrap();
    let sample = env.geo_sample(cfg.train.init_sample, cfg.train.seed);
    let (_, init) = geogrouse::training::init_params(&cfg.model, &env.vocab(), &sample, cfg.train.seed).unwrap();
    assert_eq!(saved.to_json().unwrap(), init.to_json().unwrap());

    let text = run_ok(&["--config", &cfg_path, "--out", out.to_str().unwrap(), "eval"]);
    assert!(text.contains("auc"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    let auc = report["metrics"][0]["mean"].as_f64().unwrap();
    assert!((auc - 0.5).abs() < 0.1, "random-init auc {auc}");
}

#[test]
fn gen_data_and_sweep_write_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), SMALL);
    let out = dir.path().join("d");
    run_ok(&["--config", &cfg_path, "--out", out.to_str().unwrap(), "gen-data", "--sessions", "30"]);
    let sessions = geogrouse::simulator::read_sessions(&out.join("sessions.jsonl")).unwrap();
    assert_eq!(sessions.len(), 30);
    assert!(out.join("environment.json").exists());

    let text = run_ok(&["--config", &cfg_path, "--out", out.to_str().unwrap(), "sweep", "--levels", "3"]);
    assert!(text.contains("aoi_level,auc_mean,auc_std"));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("3,"));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), SMALL);
    let outputs: Vec<Vec<Vec<u8>>> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            let o = out.to_str().unwrap();
            run_ok(&["--config", &cfg_path, "--seed", "9", "--out", o, "train"]);
            run_ok(&["--config", &cfg_path, "--seed", "9", "--out", o, "eval"]);
            ["checkpoint.json", "history.csv", "metrics.json", "metrics.txt"]
                .iter()
                .map(|f| std::fs::read(out.join(f)).unwrap())
                .collect()
        })
        .collect();
    assert_eq!(outputs[0], outputs[1]);
}
