//! Verification measurements used to judge quality scores: comparison
//! scores, FMR-calibrated thresholds, FNMR, error-versus-reject curves and
//! their area, quality-weighted template aggregation and rank correlation.
//!
//! Conventions: a comparison with `score < t` is a non-match, `score >= t` a
//! match. Pair quality defaults to the minimum of the two sample qualities.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{cosine_similarity, l2_normalize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pair {
    pub id_a: u64,
    pub id_b: u64,
    pub genuine: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairList {
    pub pairs: Vec<Pair>,
}

impl PairList {
    pub fn genuine(&self) -> impl Iterator<Item = &Pair> {
        self.pairs.iter().filter(|p| p.genuine)
    }

    pub fn impostor(&self) -> impl Iterator<Item = &Pair> {
        self.pairs.iter().filter(|p| !p.genuine)
    }

    /// Ids referenced by some pair but missing from `known`, sorted and
    /// deduplicated.
    pub fn dangling_ids<V>(&self, known: &HashMap<u64, V>) -> Vec<u64> {
        let mut missing: Vec<u64> = self
            .pairs
            .iter()
            .flat_map(|p| [p.id_a, p.id_b])
            .filter(|id| !known.contains_key(id))
            .collect();
        missing.sort_unstable();
        missing.dedup();
        missing
    }
}

pub type EmbeddingStore = HashMap<u64, Vec<f64>>;

/// Cosine similarity of each pair's embeddings.
pub fn comparison_scores(embeddings: &EmbeddingStore, pairs: &PairList) -> Result<Vec<f64>> {
    let missing = pairs.dangling_ids(embeddings);
    if !missing.is_empty() {
        return Err(Error::Lookup(missing));
    }
    pairs
        .pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            cosine_similarity(&embeddings[&p.id_a], &embeddings[&p.id_b]).map_err(|e| e.at_sample(i))
        })
        .collect()
}

/// Smallest observed impostor score `t` with `|{s >= t}| / n <= fmr_target`.
/// Returns `+∞` when no observed score qualifies.
pub fn threshold_at_fmr(impostor_scores: &[f64], fmr_target: f64) -> Result<f64> {
    if impostor_scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    if !(fmr_target > 0.0 && fmr_target <= 1.0) {
        return Err(Error::Config(format!(
            "fmr target must lie in (0, 1], got {fmr_target}"
        )));
    }
    let mut sorted = impostor_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    // The admissible set is an upper tail, so the first admissible distinct
    // value in ascending order is the answer.
    let mut i = 0;
    while i < sorted.len() {
        if (sorted.len() - i) as f64 / n <= fmr_target {
            return Ok(sorted[i]);
        }
        let v = sorted[i];
        while i < sorted.len() && sorted[i] == v {
            i += 1;
        }
    }
    Ok(f64::INFINITY)
}

/// Fraction of genuine scores strictly below `threshold`.
pub fn fnmr_at_threshold(genuine_scores: &[f64], threshold: f64) -> Result<f64> {
    if genuine_scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    let below = genuine_scores.iter().filter(|&&s| s < threshold).count();
    Ok(below as f64 / genuine_scores.len() as f64)
}

/// Fraction of impostor scores at or above `threshold`.
pub fn fmr_at_threshold(impostor_scores: &[f64], threshold: f64) -> Result<f64> {
    if impostor_scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    let above = impostor_scores.iter().filter(|&&s| s >= threshold).count();
    Ok(above as f64 / impostor_scores.len() as f64)
}

/// How two sample qualities combine into a pair quality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairQualityRule {
    #[default]
    Min,
    Mean,
}

impl PairQualityRule {
    pub fn combine(self, a: f64, b: f64) -> f64 {
        match self {
            PairQualityRule::Min => a.min(b),
            PairQualityRule::Mean => 0.5 * (a + b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErcPoint {
    pub reject_ratio: f64,
    pub fnmr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErcCurve {
    pub fmr_target: f64,
    /// Decision threshold calibrated on the impostors at rejection 0.
    pub threshold: f64,
    pub r_max: f64,
    pub points: Vec<ErcPoint>,
    pub auc: f64,
}

/// `0, step, 2·step, …, max` (the last point is `max` itself).
pub fn reject_grid(step: f64, max: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(0.0..1.0).contains(&max) || step > max && max > 0.0 {
        return Err(Error::Config(format!(
            "invalid reject grid step={step} max={max}"
        )));
    }
    let n = (max / step).round() as usize;
    let mut grid: Vec<f64> = (0..=n).map(|i| i as f64 * step).collect();
    if let Some(last) = grid.last_mut() {
        *last = max;
    }
    Ok(grid)
}

fn check_grid(grid: &[f64]) -> Result<f64> {
    if grid.len() < 2 {
        return Err(Error::InsufficientPoints(grid.len()));
    }
    if grid[0] != 0.0 {
        return Err(Error::Config("reject grid must start at 0".into()));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config("reject grid must be strictly increasing".into()));
    }
    let r_max = grid[grid.len() - 1];
    if !(r_max < 1.0) {
        return Err(Error::Config(format!(
            "maximum reject ratio must be < 1, got {r_max}"
        )));
    }
    Ok(r_max)
}

/// Number of pairs discarded at reject ratio `r` out of `total`:
/// `⌈r·total⌉` (with a `1e-9` allowance for grid rounding), always keeping
/// at least one pair.
pub fn rejected_count(r: f64, total: usize) -> usize {
    let k = (r * total as f64 - 1e-9).ceil().max(0.0) as usize;
    k.min(total.saturating_sub(1))
}

/// Indices `0..n` ordered by ascending quality; ties keep index order.
pub fn rejection_order(quality: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..quality.len()).collect();
    order.sort_by(|&a, &b| quality[a].total_cmp(&quality[b]).then(a.cmp(&b)));
    order
}

/// Error-versus-reject curve with the threshold frozen at rejection 0.
///
/// At each ratio `r` the `⌈r·G⌉` lowest-quality genuine pairs are removed and
/// FNMR is recomputed on the rest. Impostor pairs are never rejected.
pub fn erc_curve(
    genuine_scores: &[f64],
    genuine_quality: &[f64],
    impostor_scores: &[f64],
    fmr_target: f64,
    grid: &[f64],
) -> Result<ErcCurve> {
    if genuine_scores.len() != genuine_quality.len() {
        return Err(Error::Dimension {
            expected: genuine_scores.len(),
            actual: genuine_quality.len(),
        });
    }
    if genuine_scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    let r_max = check_grid(grid)?;
    let threshold = threshold_at_fmr(impostor_scores, fmr_target)?;

    let g = genuine_scores.len();
    let order = rejection_order(genuine_quality);
    // below_prefix[k] = false non-matches among the k lowest-quality pairs
    let mut below_prefix = Vec::with_capacity(g + 1);
    below_prefix.push(0usize);
    for &i in &order {
        let prev = *below_prefix.last().unwrap();
        below_prefix.push(prev + usize::from(genuine_scores[i] < threshold));
    }
    let below_total = below_prefix[g];
    let points: Vec<ErcPoint> = grid
        .iter()
        .map(|&r| {
            let k = rejected_count(r, g);
            ErcPoint {
                reject_ratio: r,
                fnmr: (below_total - below_prefix[k]) as f64 / (g - k) as f64,
            }
        })
        .collect();
    let auc = auc_of(&points, r_max);
    Ok(ErcCurve {
        fmr_target,
        threshold,
        r_max,
        points,
        auc,
    })
}

/// Variant that also rejects the lowest-quality impostor pairs at each ratio
/// and recalibrates the threshold on the survivors. `threshold` in the
/// returned curve is the rejection-0 value.
pub fn erc_curve_recalibrated(
    genuine_scores: &[f64],
    genuine_quality: &[f64],
    impostor_scores: &[f64],
    impostor_quality: &[f64],
    fmr_target: f64,
    grid: &[f64],
) -> Result<ErcCurve> {
    if genuine_scores.len() != genuine_quality.len() || impostor_scores.len() != impostor_quality.len() {
        return Err(Error::Config("scores and qualities differ in length".into()));
    }
    if genuine_scores.is_empty() || impostor_scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    let r_max = check_grid(grid)?;
    let g_order = rejection_order(genuine_quality);
    let i_order = rejection_order(impostor_quality);
    let mut points = Vec::with_capacity(grid.len());
    let mut threshold0 = f64::NAN;
    for &r in grid {
        let ki = rejected_count(r, impostor_scores.len());
        let kept_imp: Vec<f64> = i_order[ki..].iter().map(|&i| impostor_scores[i]).collect();
        let t = threshold_at_fmr(&kept_imp, fmr_target)?;
        if r == 0.0 {
            threshold0 = t;
        }
        let kg = rejected_count(r, genuine_scores.len());
        let kept_gen: Vec<f64> = g_order[kg..].iter().map(|&i| genuine_scores[i]).collect();
        points.push(ErcPoint {
            reject_ratio: r,
            fnmr: fnmr_at_threshold(&kept_gen, t)?,
        });
    }
    let auc = auc_of(&points, r_max);
    Ok(ErcCurve {
        fmr_target,
        threshold: threshold0,
        r_max,
        points,
        auc,
    })
}

fn auc_of(points: &[ErcPoint], r_max: f64) -> f64 {
    let area: f64 = points
        .windows(2)
        .map(|w| 0.5 * (w[0].fnmr + w[1].fnmr) * (w[1].reject_ratio - w[0].reject_ratio))
        .sum();
    area / r_max
}

/// Trapezoidal area under the points, divided by the largest reject ratio.
pub fn erc_auc(points: &[ErcPoint]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::InsufficientPoints(points.len()));
    }
    let r_max = points[points.len() - 1].reject_ratio;
    if !(r_max > 0.0) {
        return Err(Error::Config("curve spans no rejection range".into()));
    }
    Ok(auc_of(points, r_max))
}

/// `normalize(Σ qᵢ·eᵢ / Σ qᵢ)`.
pub fn weighted_template_aggregate<E: AsRef<[f64]>>(embeddings: &[E], qualities: &[f64]) -> Result<Vec<f64>> {
    if embeddings.is_empty() {
        return Err(Error::DegenerateWeights(None));
    }
    if embeddings.len() != qualities.len() {
        return Err(Error::Dimension {
            expected: embeddings.len(),
            actual: qualities.len(),
        });
    }
    if qualities.iter().any(|&q| !(q >= 0.0) || !q.is_finite()) {
        return Err(Error::Config(
            "template weights must be finite and non-negative".into(),
        ));
    }
    let total: f64 = qualities.iter().sum();
    if total == 0.0 {
        return Err(Error::DegenerateWeights(None));
    }
    let dim = embeddings[0].as_ref().len();
    let mut acc = vec![0.0; dim];
    for (e, &q) in embeddings.iter().zip(qualities) {
        let e = e.as_ref();
        if e.len() != dim {
            return Err(Error::Dimension {
                expected: dim,
                actual: e.len(),
            });
        }
        acc.iter_mut().zip(e).for_each(|(a, v)| *a += q * v);
    }
    acc.iter_mut().for_each(|a| *a /= total);
    l2_normalize(&acc).map_err(|_| Error::DegenerateWeights(None))
}

/// Ranks starting at 1, ties receiving their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            actual: b.len(),
        });
    }
    if a.len() < 3 {
        return Err(Error::Config(format!("spearman needs n >= 3, got {}", a.len())));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = ra.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::ConstantInput);
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// Min-max scaling to `[0, 1]`; constant input maps to `0.5`.
pub fn normalize_scores(scores: &[f64]) -> Vec<f64> {
    let (lo, hi) = scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| {
            (lo.min(s), hi.max(s))
        });
    if !(hi > lo) {
        return vec![0.5; scores.len()];
    }
    scores.iter().map(|s| (s - lo) / (hi - lo)).collect()
}
