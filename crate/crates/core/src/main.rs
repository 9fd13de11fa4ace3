use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use pfppo::harness::{
    cmd_analyze, cmd_compare, cmd_eval, cmd_train, cmd_train_rm, ExperimentConfig,
};
use pfppo::Error;

#[derive(Parser)]
#[command(
    name = "pfppo",
    version,
    about = "Policy-filtered PPO on small scorable tasks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; `compare` runs only this seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Variant such as ppo_s, ppo_m, pf_br, top_bottom, pow_2.
    #[arg(long, global = true)]
    variant: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Build preference pairs and train the reward model.
    TrainRm,
    /// Train one variant.
    Train {
        /// Write a checkpoint after every iteration.
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        checkpoints: bool,
    },
    /// Greedy evaluation of a saved policy.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of prompts; the config's eval size when omitted.
        #[arg(long)]
        prompts: Option<usize>,
    },
    /// Reward reliability report for a variant's filtration strategy.
    Analyze,
    /// Train and analyze every configured variant over the seeds.
    Compare,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
    message: String,
}

fn print<S: Serialize>(value: &S) -> Result<(), Error> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let seed = cli.seed.unwrap_or(cfg.seeds[0]);
    let variant = cli.variant.clone().unwrap_or_else(|| cfg.variant.clone());
    let name = match cli.command {
        Command::TrainRm => "train-rm",
        Command::Train { .. } => "train",
        Command::Eval { .. } => "eval",
        Command::Analyze => "analyze",
        Command::Compare => "compare",
    };
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(name));
    match cli.command {
        Command::TrainRm => print(&cmd_train_rm(&cfg, seed, &out)?),
        Command::Train { checkpoints } => {
            let record = cmd_train(&cfg, &variant, seed, &out, checkpoints)?;
            print(&serde_json::json!({
                "variant": record.variant,
                "seed": record.seed,
                "best_checkpoint": record.best_checkpoint,
                "final_eval": record.final_eval,
                "out": out,
            }))
        }
        Command::Eval {
            checkpoint,
            prompts,
        } => print(&cmd_eval(
            &cfg,
            &checkpoint,
            prompts.unwrap_or(cfg.eval.prompts),
            seed,
            &out,
        )?),
        Command::Analyze => print(&cmd_analyze(&cfg, &variant, seed, &out)?),
        Command::Compare => {
            let seeds = cli.seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s]);
            let comparison = cmd_compare(&cfg, &seeds, &out)?;
            print!("{}", comparison.to_text());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let body = ErrorBody {
                error: "usage",
                message: e.to_string(),
            };
            eprintln!("{}", serde_json::to_string(&body).expect("plain strings"));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = ErrorBody {
                error: e.kind(),
                message: e.to_string(),
            };
            eprintln!("{}", serde_json::to_string(&body).expect("plain strings"));
            ExitCode::FAILURE
        }
    }
}
