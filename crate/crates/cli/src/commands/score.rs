use std::path::PathBuf;

use clap::Args;
use crfiqa_core::evaluation::normalize_scores;
use serde::{Deserialize, Serialize};

use super::{check_input_dim, load_checkpoint};
use crate::csvio::{self, ScoreRow};
use crate::error::Result;
use crate::manifest::{create_dir, RunManifest};

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Writes `scores.csv`. Labels in the dataset are ignored.
pub fn run(args: &ScoreArgs) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    let samples = csvio::read_dataset(&args.dataset)?;
    check_input_dim(&model, &samples)?;
    let inputs: Vec<&[f64]> = samples.iter().map(|s| s.input.as_slice()).collect();
    let raw = model.predict_quality(&inputs)?;
    let norm = normalize_scores(&raw);
    let rows: Vec<ScoreRow> = samples
        .iter()
        .zip(raw.iter().zip(&norm))
        .map(|(s, (&quality_raw, &quality_norm))| ScoreRow {
            id: s.id,
            quality_raw,
            quality_norm,
        })
        .collect();

    create_dir(&args.out)?;
    csvio::write_scores(&args.out.join("scores.csv"), &rows)?;
    RunManifest::new("score", None, args)?
        .input("checkpoint", &args.checkpoint)
        .input("dataset", &args.dataset)
        .output("scores.csv")
        .write(&args.out)
}
