//! The `crfiqa` command line: synthetic data generation, training, scoring
//! and evaluation, each writing into its own output directory together with
//! a `manifest.json`.

pub mod commands;
pub mod csvio;
pub mod error;
pub mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use commands::erc::ErcArgs;
use commands::gen_data::GenDataArgs;
use commands::score::ScoreArgs;
use commands::train::TrainArgs;
use commands::weighted::WeightedArgs;
pub use error::{CliError, Result};
use manifest::RunManifest;

#[derive(Parser, Debug)]
#[command(
    name = "crfiqa",
    version,
    about = "Certainty-ratio quality training and evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone, PartialEq)]
pub enum Command {
    /// Generate a synthetic dataset, pairs and optional holdout/templates.
    GenData(GenDataArgs),
    /// Train a model (simultaneously, or refit the head of a frozen one).
    Train(TrainArgs),
    /// Predict per-sample quality.
    Score(ScoreArgs),
    /// Error-versus-reject curve at a fixed FMR.
    Erc(ErcArgs),
    /// Quality-weighted versus uniform template verification.
    WeightedVerify(WeightedArgs),
    /// Re-run the command recorded in a manifest into a new directory.
    Replay(ReplayArgs),
}

#[derive(Args, Debug, Clone, PartialEq)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("CRFIQA_LOG_LEVEL", "warn");
    let _ = env_logger::Builder::from_env(env)
        .format_timestamp(None)
        .try_init();
}

pub fn run(command: &Command) -> Result<()> {
    match command {
        Command::GenData(a) => commands::gen_data::run(a),
        Command::Train(a) => commands::train::run(a),
        Command::Score(a) => commands::score::run(a),
        Command::Erc(a) => commands::erc::run(a),
        Command::WeightedVerify(a) => commands::weighted::run(a),
        Command::Replay(a) => run(&replayed(a)?),
    }
}

/// The command stored in a manifest, redirected to `args.out`.
pub fn replayed(args: &ReplayArgs) -> Result<Command> {
    let m = RunManifest::read(&args.manifest)?;
    fn config<T: DeserializeOwned>(m: &RunManifest, path: &std::path::Path) -> Result<T> {
        serde_json::from_value(m.config.clone()).map_err(|e| CliError::Json {
            path: path.to_path_buf(),
            message: format!("config does not match command {:?}: {e}", m.command),
        })
    }
    let out = args.out.clone();
    let p = args.manifest.as_path();
    Ok(match m.command.as_str() {
        "gen-data" => Command::GenData(GenDataArgs {
            out,
            ..config(&m, p)?
        }),
        "train" => Command::Train(TrainArgs {
            out,
            ..config(&m, p)?
        }),
        "score" => Command::Score(ScoreArgs {
            out,
            ..config(&m, p)?
        }),
        "erc" => Command::Erc(ErcArgs {
            out,
            ..config(&m, p)?
        }),
        "weighted-verify" => Command::WeightedVerify(WeightedArgs {
            out,
            ..config(&m, p)?
        }),
        other => {
            return Err(CliError::Json {
                path: args.manifest.clone(),
                message: format!("unknown command {other:?}"),
            })
        }
    })
}
