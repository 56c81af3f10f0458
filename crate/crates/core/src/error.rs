use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot normalize a vector with zero norm")]
    Normalization,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("at least 2 classes are required, got {0}")]
    InsufficientClasses(usize),

    #[error("sample {index}: {source}")]
    AtSample {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("training diverged at iteration {iteration} (loss = {loss})")]
    Divergence { iteration: usize, loss: f64 },

    #[error("cannot construct pairs: {0}")]
    PairConstruction(String),

    #[error("unknown ids: {0:?}")]
    Lookup(Vec<u64>),

    #[error("score list is empty")]
    EmptyScores,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("curve needs at least 2 points, got {0}")]
    InsufficientPoints(usize),

    #[error("weights are degenerate{}", .0.as_ref().map(|t| format!(" for template {t}")).unwrap_or_default())]
    DegenerateWeights(Option<u64>),

    #[error("rank correlation is undefined for constant input")]
    ConstantInput,

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn at_sample(self, index: usize) -> Self {
        Error::AtSample {
            index,
            source: Box::new(self),
        }
    }
}
