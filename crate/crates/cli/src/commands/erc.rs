use std::collections::HashMap;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use crfiqa_core::evaluation::{
    comparison_scores, erc_curve, erc_curve_recalibrated, reject_grid, EmbeddingStore,
};
use crfiqa_core::{ErcCurve, Error, PairList, PairQualityRule};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_input_dim, load_checkpoint, QualityColumn, QualitySource};
use crate::csvio::{self, PairScore};
use crate::error::Result;
use crate::manifest::{create_dir, write_json, RunManifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairRuleArg {
    Min,
    Mean,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErcArgs {
    /// Samples to embed; also the source of `--oracle` qualities.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub pairs: PathBuf,
    /// Model providing the comparison embeddings.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub quality: QualitySource,
    #[arg(long, value_enum, default_value_t = QualityColumn::Raw)]
    pub quality_column: QualityColumn,
    /// Randomly permute the qualities across samples (a random-rejection
    /// baseline).
    #[arg(long)]
    pub shuffle_seed: Option<u64>,
    #[arg(long, default_value_t = 1e-3)]
    pub fmr: f64,
    #[arg(long, default_value_t = 0.01)]
    pub grid_step: f64,
    #[arg(long, default_value_t = 0.95)]
    pub grid_max: f64,
    #[arg(long, value_enum, default_value_t = PairRuleArg::Min)]
    pub pair_quality: PairRuleArg,
    /// Also reject impostor pairs and recompute the threshold at every ratio.
    #[arg(long)]
    pub recalibrate: bool,
    #[arg(long)]
    pub out: PathBuf,
}

/// `erc.json`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErcSummary {
    pub fmr_target: f64,
    /// `null` when no observed impostor score meets the FMR target.
    pub threshold: Option<f64>,
    pub auc: f64,
    pub r_max: f64,
}

impl From<&ErcCurve> for ErcSummary {
    fn from(c: &ErcCurve) -> Self {
        Self {
            fmr_target: c.fmr_target,
            threshold: c.threshold.is_finite().then_some(c.threshold),
            auc: c.auc,
            r_max: c.r_max,
        }
    }
}

/// Permutes the quality values over ids sorted ascending.
pub fn shuffle_qualities(quality: &HashMap<u64, f64>, seed: u64) -> HashMap<u64, f64> {
    let mut ids: Vec<u64> = quality.keys().copied().collect();
    ids.sort_unstable();
    let mut values: Vec<f64> = ids.iter().map(|id| quality[id]).collect();
    values.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    ids.into_iter().zip(values).collect()
}

/// Comparison score and combined quality of every pair.
pub fn score_pairs(
    embeddings: &EmbeddingStore,
    quality: &HashMap<u64, f64>,
    pairs: &PairList,
    rule: PairQualityRule,
) -> Result<Vec<PairScore>> {
    let missing = pairs.dangling_ids(quality);
    if !missing.is_empty() {
        return Err(Error::Lookup(missing).into());
    }
    let scores = comparison_scores(embeddings, pairs)?;
    Ok(pairs
        .pairs
        .iter()
        .zip(scores)
        .map(|(&pair, score)| PairScore {
            pair,
            score,
            pair_quality: rule.combine(quality[&pair.id_a], quality[&pair.id_b]),
        })
        .collect())
}

pub fn curve_from_pair_scores(
    rows: &[PairScore],
    fmr: f64,
    grid: &[f64],
    recalibrate: bool,
) -> Result<ErcCurve> {
    let (gen, imp): (Vec<&PairScore>, Vec<&PairScore>) = rows.iter().partition(|r| r.pair.genuine);
    let gs: Vec<f64> = gen.iter().map(|r| r.score).collect();
    let gq: Vec<f64> = gen.iter().map(|r| r.pair_quality).collect();
    let is: Vec<f64> = imp.iter().map(|r| r.score).collect();
    let curve = if recalibrate {
        let iq: Vec<f64> = imp.iter().map(|r| r.pair_quality).collect();
        erc_curve_recalibrated(&gs, &gq, &is, &iq, fmr, grid)?
    } else {
        erc_curve(&gs, &gq, &is, fmr, grid)?
    };
    Ok(curve)
}

/// Writes `erc.csv`, `erc.json` and `pair_scores.csv`; prints the AUC.
pub fn run(args: &ErcArgs) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    let samples = csvio::read_dataset(&args.dataset)?;
    check_input_dim(&model, &samples)?;
    let pairs = csvio::read_pairs(&args.pairs)?;
    let grid = reject_grid(args.grid_step, args.grid_max)?;

    let inputs: Vec<&[f64]> = samples.iter().map(|s| s.input.as_slice()).collect();
    let embeddings: EmbeddingStore = samples.iter().map(|s| s.id).zip(model.embed(&inputs)?).collect();
    let missing = pairs.dangling_ids(&embeddings);
    if !missing.is_empty() {
        return Err(Error::Lookup(missing).into());
    }
    let mut quality = args.quality.load(&samples, args.quality_column)?;
    if let Some(seed) = args.shuffle_seed {
        quality = shuffle_qualities(&quality, seed);
    }
    let rule = match args.pair_quality {
        PairRuleArg::Min => PairQualityRule::Min,
        PairRuleArg::Mean => PairQualityRule::Mean,
    };
    let rows = score_pairs(&embeddings, &quality, &pairs, rule)?;
    let curve = curve_from_pair_scores(&rows, args.fmr, &grid, args.recalibrate)?;

    create_dir(&args.out)?;
    csvio::write_pair_scores(&args.out.join("pair_scores.csv"), &rows)?;
    csvio::write_erc(&args.out.join("erc.csv"), &curve.points)?;
    write_json(&args.out.join("erc.json"), &ErcSummary::from(&curve))?;
    let mut manifest = RunManifest::new("erc", args.shuffle_seed, args)?
        .input("checkpoint", &args.checkpoint)
        .input("dataset", &args.dataset)
        .input("pairs", &args.pairs);
    if let Some(s) = &args.quality.scores {
        manifest = manifest.input("scores", s);
    }
    manifest
        .output("erc.csv")
        .output("erc.json")
        .output("pair_scores.csv")
        .write(&args.out)?;
    println!("{}", curve.auc);
    Ok(())
}
