//! `megatron` — clean-label backdoor attack pipeline for small vision
//! transformers: stage commands plus a one-shot full run.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use megatron_core::Error;

#[derive(Parser)]
#[command(
    name = "megatron",
    version,
    about = "Clean-label backdoor attack experiments on small vision transformers"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct StageArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run directory for artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for within-stage parallelism.
    #[arg(long)]
    jobs: Option<usize>,
    /// Overwrite existing stage outputs.
    #[arg(long)]
    force: bool,
    /// Print the resolved configuration and exit without writing anything.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the attacker-side surrogate transformer.
    TrainSurrogate(StageArgs),
    /// Optimize the trigger against the surrogate.
    GenTrigger(StageArgs),
    /// Craft the clean-label poisoned training set.
    Poison(StageArgs),
    /// Train the victim on the poisoned set (plus the clean baseline).
    TrainVictim(StageArgs),
    /// Compute effectiveness and stealth metrics.
    Evaluate(StageArgs),
    /// Run the whole pipeline end to end.
    Run(StageArgs),
}

impl Cmd {
    fn args(&self) -> &StageArgs {
        match self {
            Cmd::TrainSurrogate(a)
            | Cmd::GenTrigger(a)
            | Cmd::Poison(a)
            | Cmd::TrainVictim(a)
            | Cmd::Evaluate(a)
            | Cmd::Run(a) => a,
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::MissingArtifact(_) | Error::Integrity(_) => 3,
        Error::UnsafeOverwrite(_) => 4,
        Error::Stage { source, .. } => exit_code(source),
        _ => 1,
    }
}

fn run(cli: Cli) -> megatron_core::Result<()> {
    let args = cli.cmd.args();
    if let Some(jobs) = args.jobs {
        // Best effort; the pool may already exist in-process (tests).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
    let cfg = config::load_config(&args.config, args.seed)?;
    if args.dry_run {
        print!("{}", config::to_toml(&cfg)?);
        return Ok(());
    }
    match &cli.cmd {
        Cmd::Run(a) => {
            commands::cmd_run(&cfg, &a.out, a.force)?;
        }
        other => {
            let ctx = commands::Ctx::new(cfg, &other.args().out, other.args().force)?;
            match other {
                Cmd::TrainSurrogate(_) => {
                    commands::cmd_train_surrogate(&ctx)?;
                }
                Cmd::GenTrigger(_) => {
                    commands::cmd_gen_trigger(&ctx)?;
                }
                Cmd::Poison(_) => {
                    commands::cmd_poison(&ctx)?;
                }
                Cmd::TrainVictim(_) => {
                    commands::cmd_train_victim(&ctx)?;
                }
                Cmd::Evaluate(_) => {
                    commands::cmd_evaluate(&ctx)?;
                }
                Cmd::Run(_) => unreachable!(),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
