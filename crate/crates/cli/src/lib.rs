//! Command-line runner: config, simulator, training, and evaluation.
//!
//! Every command reads one TOML config, applies the `--seed`, `--out`, and
//! `--variant` overrides, prints the resolved config, and writes its
//! artifacts under the output directory.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use geogrouse::eval::{
    generate_test_sets, offline_eval, sensitivity_sweep, sweep_csv, ModelScorer,
};
use geogrouse::simulator::{generate_environment, simulate_batch, write_sessions, UniformLogger};
use geogrouse::training::{grad_check_fixture, init_params, surrogate_grad_check, train_em, DataSource};
use geogrouse::{Error, GsVariant, Model, ParamStore, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "geogrouse", version, about = "Geographic group-specific recommendation experiments")]
pub struct Cli {
    /// TOML run config; defaults apply to anything it omits.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides both the environment and the training seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides `io.output_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides `model.gs_variant` (kmeans, proto, can, din).
    #[arg(long, global = true)]
    pub variant: Option<GsVariant>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the environment and uniform-logger sessions.
    GenData {
        #[arg(long, default_value_t = 1000)]
        sessions: usize,
    },
    /// Train with EM and write the checkpoint and history.
    Train,
    /// Evaluate a checkpoint on held-out test sessions.
    Eval {
        /// Defaults to `<out>/checkpoint.json`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate once per AOI level.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        levels: Vec<usize>,
    },
    /// Finite-difference check of the full policy gradient.
    GradCheck {
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

/// Failure with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFinite(_) | Error::NonFiniteGradient { .. } => 2,
            _ => 1,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError {
        code: 1,
        message: format!("{}: {e}", path.display()),
    }
}

/// The config after file parsing and command-line overrides.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            RunConfig::from_toml(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.env.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.io.output_dir = out.clone();
    }
    if let Some(v) = cli.variant {
        cfg.model.gs_variant = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Runs one command, writing its report lines to `out`.
pub fn run(cli: &Cli, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    let cfg = resolve_config(cli)?;
    let dir = cfg.io.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let resolved = cfg.to_toml()?;
    let say = |out: &mut dyn std::io::Write, line: String| {
        let _ = writeln!(out, "{line}");
    };
    say(out, format!("# resolved config (seed {})\n{resolved}", cfg.train.seed));

    match &cli.command {
        Command::GenData { sessions } => {
            let env = generate_environment(&cfg.env)?;
            let logs = simulate_batch(&env, &UniformLogger, cfg.env.seed, 0, *sessions, true)?;
            let env_json = env.to_json()?;
            write(&dir.join("environment.json"), &env_json)?;
            write_sessions(&logs, &dir.join("sessions.jsonl"))?;
            say(out, format!("wrote {} sessions to {}", logs.len(), dir.display()));
        }
        Command::Train => {
            let env = generate_environment(&cfg.env)?;
            let sample = env.geo_sample(cfg.train.init_sample, cfg.train.seed);
            let (model, mut params) = init_params(&cfg.model, &env.vocab(), &sample, cfg.train.seed)?;
            let history = train_em(&DataSource::Simulator(&env), &model, &mut params, &cfg.train)?;
            write(&dir.join("config.toml"), &resolved)?;
            params.save(&dir.join("checkpoint.json"))?;
            write(&dir.join("history.csv"), &history.to_csv()?)?;
            if let Some(last) = history.records.last() {
                say(out, format!("round {} mean return {:.4}", last.round, last.mean_return));
            }
            say(out, format!("wrote checkpoint and history to {}", dir.display()));
        }
        Command::Eval { checkpoint } => {
            let path = checkpoint.clone().unwrap_or_else(|| dir.join("checkpoint.json"));
            if !path.exists() {
                return Err(CliError {
                    code: 1,
                    message: format!("checkpoint not found: {}", path.display()),
                });
            }
            let params = ParamStore::load(&path)?;
            let env = generate_environment(&cfg.env)?;
            let model = Model::bind(&params, &cfg.model, &env.vocab())?;
            let tests = generate_test_sets(&env, &cfg.eval)?;
            let report = offline_eval(
                &ModelScorer {
                    model: &model,
                    params: &params,
                },
                &tests,
                &cfg.eval.ndcg_ks,
                cfg.eval.hit_k,
            )?;
            write(&dir.join("metrics.json"), &report.to_json()?)?;
            write(&dir.join("metrics.txt"), &report.to_table())?;
            say(out, report.to_table());
        }
        Command::Sweep { levels } => {
            let rows = sensitivity_sweep(&cfg, levels)?;
            let csv = sweep_csv(&rows)?;
            write(&dir.join("sweep.csv"), &csv)?;
            say(out, csv);
        }
        Command::GradCheck { eps, tolerance } => {
            let mut fx = grad_check_fixture(&cfg.env, &cfg.model, cfg.train.seed)?;
            let report = surrogate_grad_check(&fx.model, &mut fx.params, &fx.batch, cfg.train.gamma, cfg.train.baseline, *eps)?;
            say(
                out,
                format!(
                    "grad check {}: max relative error {:.3e} over {} coordinates (worst {}[{}])",
                    cfg.model.gs_variant,
                    report.max_rel_error,
                    report.coordinates,
                    report.worst_slot.as_deref().unwrap_or("-"),
                    report.worst_index
                ),
            );
            if !(report.max_rel_error < *tolerance) {
                return Err(CliError {
                    code: 2,
                    message: format!(
                        "gradient check failed: {:.3e} >= {tolerance:.1e}",
                        report.max_rel_error
                    ),
                });
            }
        }
    }
    Ok(())
}
