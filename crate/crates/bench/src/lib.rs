//! Fixtures shared by the benchmarks.

use crfiqa_core::synthdata::generate;
use crfiqa_core::{Activation, BackboneConfig, Dataset, HeadInput, ModelConfig, ModelState, SyntheticSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The reference synthetic task: 20 identities, 50 samples each, 32 inputs.
pub fn reference_dataset() -> Dataset {
    let spec = SyntheticSpec {
        num_classes: 20,
        samples_per_class: 50,
        input_dim: 32,
        noise_levels: vec![0.05, 0.2, 0.5, 1.0],
        seed: 7,
    };
    let samples = generate(&spec).expect("valid spec");
    Dataset::new(
        samples.iter().map(|s| s.input.clone()).collect(),
        samples.iter().map(|s| s.label).collect(),
    )
    .expect("consistent dataset")
}

pub fn reference_model(seed: u64) -> ModelState {
    let config = ModelConfig {
        backbone: BackboneConfig {
            input_dim: 32,
            hidden_dims: vec![256],
            embedding_dim: 16,
            activation: Activation::Relu,
        },
        num_classes: 20,
        head_input: HeadInput::Raw,
    };
    ModelState::init(config, seed).expect("valid config")
}

/// Cosine matrix `n × classes` with one label per row.
pub fn random_cosines(n: usize, classes: usize, seed: u64) -> (Vec<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cos = (0..n * classes).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    (cos, labels)
}

/// Genuine scores, their qualities and impostor scores.
pub fn random_scores(genuine: usize, impostor: usize, seed: u64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gs = (0..genuine).map(|_| rng.random_range(0.0..1.0)).collect();
    let gq = (0..genuine).map(|_| rng.random_range(0.0..1.0)).collect();
    let is = (0..impostor).map(|_| rng.random_range(-0.5..0.7)).collect();
    (gs, gq, is)
}
