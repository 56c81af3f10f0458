use std::collections::HashMap;
use std::path::PathBuf;

use clap::Args;
use crfiqa_core::evaluation::{
    comparison_scores, fmr_at_threshold, fnmr_at_threshold, threshold_at_fmr, weighted_template_aggregate,
    EmbeddingStore,
};
use crfiqa_core::synthdata::{template_pairs, Template};
use crfiqa_core::{Error, PairList};
use serde::{Deserialize, Serialize};

use super::{check_input_dim, load_checkpoint, QualityColumn, QualitySource};
use crate::csvio;
use crate::error::Result;
use crate::manifest::{create_dir, write_json, RunManifest};

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub templates: PathBuf,
    #[command(flatten)]
    pub quality: QualitySource,
    #[arg(long, value_enum, default_value_t = QualityColumn::Raw)]
    pub quality_column: QualityColumn,
    #[arg(long, default_value_t = 1e-3)]
    pub fmr: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Operating {
    /// `null` when no observed impostor score meets the FMR target.
    pub threshold: Option<f64>,
    pub fnmr: f64,
    pub fmr: f64,
}

/// `report.json`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedReport {
    pub fmr_target: f64,
    pub templates: usize,
    pub genuine_pairs: usize,
    pub impostor_pairs: usize,
    pub weighted: Operating,
    pub uniform: Operating,
}

/// One embedding per template. Members' weights only matter up to a common
/// factor, so a template whose weights are all equal is aggregated with unit
/// weights and matches the uniform baseline bit for bit.
pub fn aggregate_templates(
    templates: &[Template],
    embeddings: &EmbeddingStore,
    weight: impl Fn(u64) -> f64,
) -> Result<EmbeddingStore> {
    let mut missing: Vec<u64> = templates
        .iter()
        .flat_map(|t| &t.members)
        .filter(|id| !embeddings.contains_key(id))
        .copied()
        .collect();
    if !missing.is_empty() {
        missing.sort_unstable();
        missing.dedup();
        return Err(Error::Lookup(missing).into());
    }
    templates
        .iter()
        .map(|t| {
            let members: Vec<&[f64]> = t.members.iter().map(|id| embeddings[id].as_slice()).collect();
            let mut weights: Vec<f64> = t.members.iter().map(|&id| weight(id)).collect();
            if weights.windows(2).all(|w| w[0] == w[1]) && weights.first().is_some_and(|&w| w > 0.0) {
                weights.iter_mut().for_each(|w| *w = 1.0);
            }
            let e = weighted_template_aggregate(&members, &weights).map_err(|e| match e {
                Error::DegenerateWeights(None) => Error::DegenerateWeights(Some(t.id)),
                other => other,
            })?;
            Ok((t.id, e))
        })
        .collect()
}

pub fn operating_point(store: &EmbeddingStore, pairs: &PairList, fmr: f64) -> Result<Operating> {
    let scores = comparison_scores(store, pairs)?;
    let (gen, imp): (Vec<_>, Vec<_>) = pairs.pairs.iter().zip(scores).partition(|(p, _)| p.genuine);
    let gs: Vec<f64> = gen.into_iter().map(|(_, s)| s).collect();
    let is: Vec<f64> = imp.into_iter().map(|(_, s)| s).collect();
    let t = threshold_at_fmr(&is, fmr)?;
    Ok(Operating {
        threshold: t.is_finite().then_some(t),
        fnmr: fnmr_at_threshold(&gs, t)?,
        fmr: fmr_at_threshold(&is, t)?,
    })
}

/// Writes `report.json` and prints both FNMR values.
pub fn run(args: &WeightedArgs) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    let samples = csvio::read_dataset(&args.dataset)?;
    check_input_dim(&model, &samples)?;
    let templates = csvio::read_templates(&args.templates)?;
    let inputs: Vec<&[f64]> = samples.iter().map(|s| s.input.as_slice()).collect();
    let embeddings: EmbeddingStore = samples.iter().map(|s| s.id).zip(model.embed(&inputs)?).collect();
    let quality: HashMap<u64, f64> = args.quality.load(&samples, args.quality_column)?;
    let missing: Vec<u64> = {
        let mut m: Vec<u64> = templates
            .iter()
            .flat_map(|t| &t.members)
            .filter(|id| !quality.contains_key(id))
            .copied()
            .collect();
        m.sort_unstable();
        m.dedup();
        m
    };
    if !missing.is_empty() {
        return Err(Error::Lookup(missing).into());
    }

    let weighted = aggregate_templates(&templates, &embeddings, |id| quality[&id])?;
    let uniform = aggregate_templates(&templates, &embeddings, |_| 1.0)?;
    let pairs = template_pairs(&templates);
    let report = WeightedReport {
        fmr_target: args.fmr,
        templates: templates.len(),
        genuine_pairs: pairs.genuine().count(),
        impostor_pairs: pairs.impostor().count(),
        weighted: operating_point(&weighted, &pairs, args.fmr)?,
        uniform: operating_point(&uniform, &pairs, args.fmr)?,
    };

    create_dir(&args.out)?;
    write_json(&args.out.join("report.json"), &report)?;
    let mut manifest = RunManifest::new("weighted-verify", None, args)?
        .input("checkpoint", &args.checkpoint)
        .input("dataset", &args.dataset)
        .input("templates", &args.templates);
    if let Some(s) = &args.quality.scores {
        manifest = manifest.input("scores", s);
    }
    manifest.output("report.json").write(&args.out)?;
    println!("weighted_fnmr {}", report.weighted.fnmr);
    println!("uniform_fnmr {}", report.uniform.fnmr);
    Ok(())
}
