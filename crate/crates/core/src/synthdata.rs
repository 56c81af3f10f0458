//! Identity-structured synthetic data with known ground-truth quality.
//!
//! Each class owns a random unit prototype; a sample is the prototype plus
//! isotropic Gaussian noise of level `σ`, projected back onto the sphere.
//! Ground-truth quality is `σ_min / σ`.
//!
//! Every random draw comes from a ChaCha stream selected by `(class, index)`,
//! so a sample does not depend on how many others are generated.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{Pair, PairList};
use crate::geometry::l2_normalize_in_place;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    /// Strictly positive and strictly increasing.
    pub noise_levels: Vec<f64>,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InsufficientClasses(self.num_classes));
        }
        if self.samples_per_class < 2 || self.input_dim == 0 {
            return Err(Error::Config(format!(
                "need samples_per_class >= 2 and input_dim >= 1, got {} and {}",
                self.samples_per_class, self.input_dim
            )));
        }
        let levels = &self.noise_levels;
        if levels.is_empty()
            || levels.iter().any(|&s| !(s > 0.0) || !s.is_finite())
            || levels.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config(format!(
                "noise levels must be positive and strictly increasing: {levels:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSample {
    pub id: u64,
    pub label: usize,
    pub sigma: f64,
    pub true_quality: f64,
    pub input: Vec<f64>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Class prototypes, uniform on the unit sphere.
pub fn prototypes(spec: &SyntheticSpec) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, 0);
    (0..spec.num_classes)
        .map(|_| {
            let mut p = gaussian_vec(&mut rng, spec.input_dim);
            l2_normalize_in_place(&mut p)?;
            Ok(p)
        })
        .collect()
}

/// Samples with within-class indices `start..end`, class-major; ids start at
/// `first_id`.
fn generate_range(
    spec: &SyntheticSpec,
    start: usize,
    end: usize,
    first_id: u64,
) -> Result<Vec<SyntheticSample>> {
    let protos = prototypes(spec)?;
    let sigma_min = spec.noise_levels[0];
    let k = spec.noise_levels.len();
    let mut out = Vec::with_capacity(spec.num_classes * (end - start));
    let mut id = first_id;
    for (label, proto) in protos.iter().enumerate() {
        for idx in start..end {
            let sigma = spec.noise_levels[idx % k];
            let mut rng = stream_rng(spec.seed, 1 + ((label as u64) << 32 | idx as u64));
            let mut input: Vec<f64> = gaussian_vec(&mut rng, spec.input_dim)
                .iter()
                .zip(proto)
                .map(|(z, p)| p + sigma * z)
                .collect();
            l2_normalize_in_place(&mut input)?;
            out.push(SyntheticSample {
                id,
                label,
                sigma,
                true_quality: sigma_min / sigma,
                input,
            });
            id += 1;
        }
    }
    Ok(out)
}

/// `num_classes × samples_per_class` samples, class-major, ids `0..N`.
/// Within a class, `σ` cycles through the noise levels.
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<SyntheticSample>> {
    spec.validate()?;
    generate_range(spec, 0, spec.samples_per_class, 0)
}

/// Further samples of the same identities: within-class indices
/// `samples_per_class..samples_per_class + per_class`, ids continuing after
/// the training set.
pub fn generate_holdout(spec: &SyntheticSpec, per_class: usize) -> Result<Vec<SyntheticSample>> {
    spec.validate()?;
    let n = spec.samples_per_class;
    generate_range(spec, n, n + per_class, (spec.num_classes * n) as u64)
}

/// Samples genuine (same label) and impostor (different label) pairs without
/// repetition. Genuine pairs come first.
pub fn make_pairs(
    samples: &[SyntheticSample],
    num_genuine: usize,
    num_impostor: usize,
    seed: u64,
) -> Result<PairList> {
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let ids: Vec<u64> = samples.iter().map(|s| s.id).collect();
    let idx = sample_pairs(&labels, num_genuine, num_impostor, seed)?;
    Ok(PairList {
        pairs: idx
            .into_iter()
            .map(|(a, b, genuine)| Pair {
                id_a: ids[a],
                id_b: ids[b],
                genuine,
            })
            .collect(),
    })
}

/// Index-level pair sampling over a label vector.
pub fn sample_pairs(
    labels: &[usize],
    num_genuine: usize,
    num_impostor: usize,
    seed: u64,
) -> Result<Vec<(usize, usize, bool)>> {
    let n = labels.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut genuine_all: Vec<(usize, usize)> = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if labels[a] == labels[b] {
                genuine_all.push((a, b));
            }
        }
    }
    let total_pairs = n * n.saturating_sub(1) / 2;
    let impostor_total = total_pairs - genuine_all.len();
    if num_genuine > genuine_all.len() {
        return Err(Error::PairConstruction(format!(
            "{num_genuine} genuine pairs requested, only {} exist",
            genuine_all.len()
        )));
    }
    if num_impostor > impostor_total {
        return Err(Error::PairConstruction(format!(
            "{num_impostor} impostor pairs requested, only {impostor_total} exist"
        )));
    }
    genuine_all.shuffle(&mut rng);
    let mut out: Vec<(usize, usize, bool)> = genuine_all[..num_genuine]
        .iter()
        .map(|&(a, b)| (a, b, true))
        .collect();

    if 2 * num_impostor >= impostor_total {
        let mut all: Vec<(usize, usize)> = (0..n)
            .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
            .filter(|&(a, b)| labels[a] != labels[b])
            .collect();
        all.shuffle(&mut rng);
        out.extend(all[..num_impostor].iter().map(|&(a, b)| (a, b, false)));
    } else {
        let mut seen = HashSet::with_capacity(num_impostor);
        while seen.len() < num_impostor {
            let a = rng.random_range(0..n);
            let b = rng.random_range(0..n);
            if labels[a] == labels[b] {
                continue;
            }
            let key = (a.min(b), a.max(b));
            if seen.insert(key) {
                out.push((key.0, key.1, false));
            }
        }
    }
    Ok(out)
}

/// A group of same-identity samples compared as one unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub id: u64,
    pub label: usize,
    pub members: Vec<u64>,
}

/// Shuffles each class and cuts it into templates of `size` members; a
/// shorter remainder becomes its own template.
pub fn make_templates(samples: &[SyntheticSample], size: usize, seed: u64) -> Result<Vec<Template>> {
    if size == 0 {
        return Err(Error::Config("template size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = samples.iter().map(|s| s.label + 1).max().unwrap_or(0);
    let mut out = Vec::new();
    for label in 0..classes {
        let mut ids: Vec<u64> = samples
            .iter()
            .filter(|s| s.label == label)
            .map(|s| s.id)
            .collect();
        ids.shuffle(&mut rng);
        for chunk in ids.chunks(size) {
            out.push(Template {
                id: out.len() as u64,
                label,
                members: chunk.to_vec(),
            });
        }
    }
    Ok(out)
}

/// Every unordered pair of templates, flagged genuine when labels match.
pub fn template_pairs(templates: &[Template]) -> PairList {
    let mut pairs = Vec::new();
    for (i, a) in templates.iter().enumerate() {
        for b in &templates[i + 1..] {
            pairs.push(Pair {
                id_a: a.id,
                id_b: b.id,
                genuine: a.label == b.label,
            });
        }
    }
    PairList { pairs }
}
