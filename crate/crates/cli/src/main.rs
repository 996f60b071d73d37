use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use clft_core::experiment::{
    generate_data, report, run_experiment, run_finetune, run_pretrain, run_probe, sweep, ExperimentConfig, SweepSpec,
};
use clft_core::Result;
use log::{error, info};

#[derive(Parser)]
#[command(name = "clft", version, about = "Continual-learning fine-tuning experiments on synthetic speech")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory; defaults to the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override (data seed for gen-data, pretraining seed for pretrain,
    /// the single fine-tuning seed otherwise).
    #[arg(long)]
    seed: Option<u64>,
    /// Replace existing outputs.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpora into {out}/data.
    GenData(Common),
    /// Pretrain the encoder with the masked-prediction objective.
    Pretrain(Common),
    /// Fine-tune every configured (strategy, seed) pair.
    Finetune(Common),
    /// Probe fine-tuning checkpoints with the pretraining loss.
    Probe(Common),
    /// Full pipeline: gen-data, pretrain, Fisher, fine-tune, probe.
    Run(Common),
    /// Hyperparameter sweep over r, lambda or p_R.
    Sweep {
        /// Sweep spec (JSON).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Single fine-tuning seed override.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        overwrite: bool,
    },
    /// Summary table and probe overlay from completed run directories.
    Report {
        /// Run directories to aggregate.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy)]
enum SeedTarget {
    Data,
    Pretrain,
    Finetune,
}

fn load(common: &Common, target: SeedTarget) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        match target {
            SeedTarget::Data => cfg.data.seed = seed,
            SeedTarget::Pretrain => cfg.pretrain_seed = seed,
            SeedTarget::Finetune => cfg.seeds = vec![seed],
        }
    }
    let out = common.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    Ok((cfg, out))
}

fn done(what: &str, path: &Path) {
    info!("{what}");
    println!("{}", path.display());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let (cfg, out) = load(&c, SeedTarget::Data)?;
            cfg.validate()?;
            for path in generate_data(&cfg, &out, c.overwrite)? {
                println!("{}", path.display());
            }
        }
        Command::Pretrain(c) => {
            let (cfg, out) = load(&c, SeedTarget::Pretrain)?;
            run_pretrain(&cfg, &out, c.overwrite)?;
            done("pretraining finished", &out.join("pretrain"));
        }
        Command::Finetune(c) => {
            let (cfg, out) = load(&c, SeedTarget::Finetune)?;
            run_finetune(&cfg, &out, c.overwrite)?;
            done("fine-tuning finished", &out.join("metrics.csv"));
        }
        Command::Probe(c) => {
            let (cfg, out) = load(&c, SeedTarget::Finetune)?;
            run_probe(&cfg, &out, c.overwrite)?;
            done("probing finished", &out.join("probe.csv"));
        }
        Command::Run(c) => {
            let (cfg, out) = load(&c, SeedTarget::Finetune)?;
            let dir = run_experiment(&cfg, &out, c.overwrite)?;
            done("experiment finished", &dir);
        }
        Command::Sweep {
            config,
            out,
            seed,
            overwrite,
        } => {
            let mut spec = SweepSpec::load(&config)?;
            if let Some(seed) = seed {
                spec.base.seeds = vec![seed];
            }
            let out = out.unwrap_or_else(|| spec.base.output_dir.clone());
            sweep(&spec, &out, overwrite)?;
            done("sweep finished", &out.join("sweep.csv"));
        }
        Command::Report { runs, out } => {
            report(&runs, &out)?;
            done("report written", &out.join("table.csv"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::FAILURE
        }
    }
}
