//! Certainty-ratio face image quality: learn to predict how classifiable a
//! sample is (its certainty ratio) while training an angular-margin embedding
//! model, and evaluate the resulting quality scores with error-versus-reject
//! curves.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classifiability;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod synthdata;
pub mod trainer;

pub use classifiability::{
    batch_classifiability, ccs, certainty_ratio, nnccs, ClassCenterMatrix, ClassifiabilityRecord,
};
pub use error::{Error, Result};
pub use evaluation::{ErcCurve, ErcPoint, Pair, PairList, PairQualityRule};
pub use geometry::EmbeddingVector;
pub use losses::{arcface_loss, combined_loss, smooth_l1, LossConfig, LossValue};
pub use model::{Activation, BackboneConfig, HeadInput, ModelConfig, ModelState};
pub use synthdata::{SyntheticSample, SyntheticSpec};
pub use trainer::{Dataset, StepReport, TargetMode, TrainConfig, TrainingMode};
