use std::path::PathBuf;

use clap::{Args, ValueEnum};
use crfiqa_core::trainer::{forward_batch, train, train_on_top};
use crfiqa_core::{
    Activation, BackboneConfig, Dataset, HeadInput, LossConfig, ModelConfig, ModelState, StepReport,
    TargetMode, TrainConfig, TrainingMode,
};
use serde::{Deserialize, Serialize};

use super::{check_input_dim, load_checkpoint};
use crate::csvio;
use crate::error::{CliError, Result};
use crate::manifest::{create_dir, RunManifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetArg {
    Cr,
    Ccs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    Simultaneous,
    OnTop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationArg {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadInputArg {
    Raw,
    Normalized,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Frozen model whose head is refit (on-top mode only).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Seeds both the initialization and the batch order.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 5e-4)]
    pub weight_decay: f64,
    /// Iterations where the learning rate drops 10x. Defaults to 5/8 and 7/8
    /// of the budget.
    #[arg(long, value_delimiter = ',')]
    pub lr_milestones: Option<Vec<usize>>,
    /// Iterations over which the margin ramps up from 0.
    #[arg(long, default_value_t = 0)]
    pub margin_warmup: usize,
    #[arg(long, default_value_t = 10.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.5)]
    pub margin: f64,
    #[arg(long, default_value_t = 64.0)]
    pub scale: f64,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 1e-9)]
    pub eps: f64,
    #[arg(long, value_enum, default_value_t = TargetArg::Cr)]
    pub target: TargetArg,
    #[arg(long, value_enum, default_value_t = ModeArg::Simultaneous)]
    pub mode: ModeArg,
    /// Hidden layer widths; pass the flag without values for none.
    #[arg(long, value_delimiter = ',', num_args = 0.., default_value = "256")]
    pub hidden: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    pub embedding_dim: usize,
    #[arg(long, value_enum, default_value_t = ActivationArg::Relu)]
    pub activation: ActivationArg,
    #[arg(long, value_enum, default_value_t = HeadInputArg::Raw)]
    pub head_input: HeadInputArg,
    /// A log row every this many iterations, plus the last one.
    #[arg(long, default_value_t = 10)]
    pub log_every: usize,
}

impl TrainArgs {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            loss: LossConfig {
                scale: self.scale,
                margin: self.margin,
                lambda: self.lambda,
                beta: self.beta,
                eps: self.eps,
            },
            batch_size: self.batch_size,
            total_iterations: self.iterations,
            lr: self.lr,
            lr_milestones: self.lr_milestones.clone(),
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            margin_warmup: self.margin_warmup,
            seed: self.seed,
            target_mode: match self.target {
                TargetArg::Cr => TargetMode::Cr,
                TargetArg::Ccs => TargetMode::Ccs,
            },
            training_mode: match self.mode {
                ModeArg::Simultaneous => TrainingMode::Simultaneous,
                ModeArg::OnTop => TrainingMode::OnTop,
            },
        }
    }

    pub fn model_config(&self, input_dim: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                input_dim,
                hidden_dims: self.hidden.clone(),
                embedding_dim: self.embedding_dim,
                activation: match self.activation {
                    ActivationArg::Relu => Activation::Relu,
                    ActivationArg::Tanh => Activation::Tanh,
                },
            },
            num_classes,
            head_input: match self.head_input {
                HeadInputArg::Raw => HeadInput::Raw,
                HeadInputArg::Normalized => HeadInput::Normalized,
            },
        }
    }
}

fn logged(iteration: usize, total: usize, every: usize) -> bool {
    iteration.is_multiple_of(every) || iteration + 1 == total
}

/// Writes `checkpoint.bin` and `train_log.csv`.
///
/// In on-top mode the log's `cr_loss` and `total_loss` both hold the head's
/// regression loss, `arc_loss` is 0 and the CCS/NNCCS means are those of the
/// frozen model over the whole dataset.
pub fn run(args: &TrainArgs) -> Result<()> {
    if args.log_every == 0 {
        return Err(CliError::Usage("--log-every must be positive".into()));
    }
    let samples = csvio::read_dataset(&args.dataset)?;
    if samples.is_empty() {
        return Err(crfiqa_core::Error::Config("dataset has no rows".into()).into());
    }
    let data = Dataset::new(
        samples.iter().map(|s| s.input.clone()).collect(),
        samples.iter().map(|s| s.label).collect(),
    )?;
    let cfg = args.train_config();
    let mut manifest = RunManifest::new("train", Some(args.seed), args)?.input("dataset", &args.dataset);

    let (state, log): (ModelState, Vec<StepReport>) = match args.mode {
        ModeArg::Simultaneous => {
            if args.checkpoint.is_some() {
                return Err(CliError::Usage(
                    "--checkpoint is only used with --mode on-top".into(),
                ));
            }
            let num_classes = data.labels.iter().max().map_or(0, |&l| l + 1);
            let init = ModelState::init(args.model_config(data.inputs[0].len(), num_classes), args.seed)?;
            let (state, reports) = train(init, &data, &cfg)?;
            let log = reports
                .into_iter()
                .filter(|r| logged(r.iteration, cfg.total_iterations, args.log_every))
                .collect();
            (state, log)
        }
        ModeArg::OnTop => {
            let path = args
                .checkpoint
                .as_ref()
                .ok_or_else(|| CliError::Usage("--mode on-top needs --checkpoint".into()))?;
            let frozen = load_checkpoint(path)?;
            check_input_dim(&frozen, &samples)?;
            manifest = manifest.input("checkpoint", path);
            let (state, losses) = train_on_top(&frozen, &data, &cfg)?;
            let xs: Vec<&[f64]> = data.inputs.iter().map(|v| v.as_slice()).collect();
            let records = forward_batch(&frozen, &xs, &data.labels, cfg.loss.eps)?.records;
            let n = records.len() as f64;
            let mean_ccs = records.iter().map(|r| r.ccs).sum::<f64>() / n;
            let mean_nnccs = records.iter().map(|r| r.nnccs).sum::<f64>() / n;
            let log = losses
                .iter()
                .enumerate()
                .filter(|&(i, _)| logged(i, losses.len(), args.log_every))
                .map(|(iteration, &loss)| StepReport {
                    iteration,
                    arc_loss: 0.0,
                    cr_loss: loss,
                    total_loss: loss,
                    mean_ccs,
                    mean_nnccs,
                })
                .collect();
            (state, log)
        }
    };

    create_dir(&args.out)?;
    let ckpt = args.out.join("checkpoint.bin");
    state.save(&ckpt).map_err(|e| match e {
        crfiqa_core::Error::Io(source) => CliError::Io {
            path: ckpt.clone(),
            source,
        },
        other => other.into(),
    })?;
    csvio::write_train_log(&args.out.join("train_log.csv"), &log)?;
    if let Some(last) = log.last() {
        log::info!(
            "iteration {}: arc {:.4} cr {:.5} ccs {:.4}",
            last.iteration,
            last.arc_loss,
            last.cr_loss,
            last.mean_ccs
        );
    }
    manifest
        .output("checkpoint.bin")
        .output("train_log.csv")
        .write(&args.out)
}
