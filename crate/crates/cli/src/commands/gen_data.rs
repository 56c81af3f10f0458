use std::path::PathBuf;

use clap::Args;
use crfiqa_core::synthdata::{generate, generate_holdout, make_pairs, make_templates};
use crfiqa_core::SyntheticSpec;
use serde::{Deserialize, Serialize};

use crate::csvio;
use crate::error::Result;
use crate::manifest::{create_dir, RunManifest};

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 20)]
    pub classes: usize,
    #[arg(long, default_value_t = 50)]
    pub per_class: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    /// Noise levels, ascending.
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.2,0.5,1.0")]
    pub sigmas: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Extra samples per class written to holdout.csv. Pairs and templates
    /// are drawn from the holdout when it is present.
    #[arg(long, default_value_t = 0)]
    pub holdout_per_class: usize,
    #[arg(long, default_value_t = 1000)]
    pub genuine: usize,
    #[arg(long, default_value_t = 10000)]
    pub impostor: usize,
    /// Members per template; 0 skips templates.csv.
    #[arg(long, default_value_t = 0)]
    pub template_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

impl GenDataArgs {
    pub fn spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: self.classes,
            samples_per_class: self.per_class,
            input_dim: self.dim,
            noise_levels: self.sigmas.clone(),
            seed: self.seed,
        }
    }
}

pub fn run(args: &GenDataArgs) -> Result<()> {
    let spec = args.spec();
    let samples = generate(&spec)?;
    create_dir(&args.out)?;
    let mut manifest = RunManifest::new("gen-data", Some(args.seed), args)?;

    csvio::write_dataset(&args.out.join("dataset.csv"), &samples)?;
    manifest = manifest.output("dataset.csv");

    let holdout = if args.holdout_per_class > 0 {
        let h = generate_holdout(&spec, args.holdout_per_class)?;
        csvio::write_dataset(&args.out.join("holdout.csv"), &h)?;
        manifest = manifest.output("holdout.csv");
        Some(h)
    } else {
        None
    };
    let eval = holdout.as_deref().unwrap_or(&samples);

    let pairs = make_pairs(eval, args.genuine, args.impostor, args.seed.wrapping_add(1))?;
    csvio::write_pairs(&args.out.join("pairs.csv"), &pairs)?;
    manifest = manifest.output("pairs.csv");

    if args.template_size > 0 {
        let templates = make_templates(eval, args.template_size, args.seed.wrapping_add(2))?;
        csvio::write_templates(&args.out.join("templates.csv"), &templates)?;
        manifest = manifest.output("templates.csv");
    }
    log::info!(
        "wrote {} samples, {} pairs to {}",
        samples.len(),
        pairs.pairs.len(),
        args.out.display()
    );
    manifest.write(&args.out)
}
