mod commands;
mod config;
mod error;
mod run;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Global;
use config::Config;
use error::CliError;
use run::RunManifest;

#[derive(Parser)]
#[command(name = "frad", version, about = "Fractional denoising experiments on a toy molecular potential")]
struct Cli {
    /// `key = value` file, or a manifest.json from an earlier run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Input {
    /// Input file (dataset JSONL, or XYZ/MOL for perturb).
    #[arg(long)]
    input: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the toy dataset.
    GenData,
    /// Apply hybrid noise to one molecule.
    Perturb {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Linearization error and target accuracy of the torsion map.
    EstimateC(Input),
    /// CGN-only vs hybrid targets against oracle forces.
    ForceAccuracy(Input),
    /// Mean atom displacement per noise setting.
    PerturbationScale(Input),
    Pretrain(Input),
    Finetune {
        #[command(flatten)]
        input: Input,
        /// Checkpoint to start from (random init otherwise).
        #[arg(long)]
        init: Option<PathBuf>,
    },
    Eval {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// gen-data, pretrain, finetune and eval in one run.
    Pipeline,
}

fn load_config(path: Option<&PathBuf>) -> Result<(Config, Option<u64>), CliError> {
    let Some(path) = path else {
        return Ok((Config::default(), None));
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e == "json") {
        let m: RunManifest = serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("{}: not a run manifest: {e}", path.display())))?;
        let map: BTreeMap<String, String> = m.config;
        return Ok((Config::from_map(map), Some(m.seed)));
    }
    Ok((Config::parse(&text)?, None))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (mut cfg, manifest_seed) = load_config(cli.config.as_ref())?;
    if cli.threads == 0 {
        return Err(CliError::config("--threads must be >= 1"));
    }
    let g = Global {
        out: cli.out,
        seed: cli.seed.or(manifest_seed).unwrap_or(0),
        threads: cli.threads,
    };
    let set_input = |cfg: &mut Config, i: &Input| {
        if let Some(p) = &i.input {
            cfg.set("input", p.display());
        }
    };
    match &cli.cmd {
        Cmd::GenData => commands::gen_data(&mut cfg, &g),
        Cmd::Perturb { input, kind, sigma, tau } => {
            set_input(&mut cfg, input);
            if let Some(k) = kind {
                cfg.set("noise.kind", k);
            }
            if let Some(s) = sigma {
                cfg.set("noise.sigma", s);
            }
            if let Some(t) = tau {
                cfg.set("noise.tau", t);
            }
            commands::perturb_cmd(&mut cfg, &g)
        }
        Cmd::EstimateC(i) => {
            set_input(&mut cfg, i);
            commands::estimate_c(&mut cfg, &g)
        }
        Cmd::ForceAccuracy(i) => {
            set_input(&mut cfg, i);
            commands::force_accuracy(&mut cfg, &g)
        }
        Cmd::PerturbationScale(i) => {
            set_input(&mut cfg, i);
            commands::perturbation_scale_cmd(&mut cfg, &g)
        }
        Cmd::Pretrain(i) => {
            set_input(&mut cfg, i);
            commands::pretrain(&mut cfg, &g)
        }
        Cmd::Finetune { input, init } => {
            set_input(&mut cfg, input);
            if let Some(p) = init {
                cfg.set("finetune.init", p.display());
            }
            commands::finetune_cmd(&mut cfg, &g)
        }
        Cmd::Eval { input, checkpoint } => {
            set_input(&mut cfg, input);
            if let Some(p) = checkpoint {
                cfg.set("eval.checkpoint", p.display());
            }
            commands::eval(&mut cfg, &g)
        }
        Cmd::Pipeline => commands::pipeline(&mut cfg, &g),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
