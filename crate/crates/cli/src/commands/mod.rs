pub mod erc;
pub mod gen_data;
pub mod score;
pub mod train;
pub mod weighted;

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use crfiqa_core::{Error, ModelState, SyntheticSample};
use serde::{Deserialize, Serialize};

use crate::csvio;
use crate::error::{CliError, Result};

pub(crate) fn load_checkpoint(path: &Path) -> Result<ModelState> {
    ModelState::load(path).map_err(|e| match e {
        Error::Io(source) => CliError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other.into(),
    })
}

pub(crate) fn check_input_dim(model: &ModelState, samples: &[SyntheticSample]) -> Result<()> {
    if let Some(s) = samples.first() {
        if s.input.len() != model.input_dim() {
            return Err(Error::Config(format!(
                "dataset has {} input columns, checkpoint expects {}",
                s.input.len(),
                model.input_dim()
            ))
            .into());
        }
    }
    Ok(())
}

/// Which column of a score file supplies the quality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QualityColumn {
    #[default]
    Raw,
    Norm,
}

/// Per-sample quality for evaluation: a score file or the dataset's
/// ground truth.
#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[group(required = true, multiple = false)]
pub struct QualitySource {
    /// Score file written by `score`.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Use the dataset's true_quality column.
    #[arg(long)]
    pub oracle: bool,
}

impl QualitySource {
    pub(crate) fn load(
        &self,
        samples: &[SyntheticSample],
        column: QualityColumn,
    ) -> Result<HashMap<u64, f64>> {
        match &self.scores {
            Some(path) => Ok(csvio::read_scores(path)?
                .into_iter()
                .map(|s| {
                    let q = match column {
                        QualityColumn::Raw => s.quality_raw,
                        QualityColumn::Norm => s.quality_norm,
                    };
                    (s.id, q)
                })
                .collect()),
            None => Ok(samples.iter().map(|s| (s.id, s.true_quality)).collect()),
        }
    }
}
