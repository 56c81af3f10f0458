//! Additive angular margin softmax, Smooth-L1 regression and their weighted
//! combination, each returning its value with a hand-derived gradient.
//!
//! All reductions are batch means accumulated sequentially, so repeated calls
//! on identical inputs are bit-identical.

use serde::{Deserialize, Serialize};

use crate::classifiability::DEFAULT_EPS;
use crate::error::{Error, Result};
use crate::geometry::{cos_add_margin, cos_add_margin_derivative};

/// Hyperparameters of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Logit scale `s`.
    pub scale: f64,
    /// Additive angular margin `m` in radians.
    pub margin: f64,
    /// Weight `λ` of the quality regression term.
    pub lambda: f64,
    /// Smooth-L1 switch point `β`.
    pub beta: f64,
    /// Certainty-ratio denominator shift `ε`.
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            scale: 64.0,
            margin: 0.5,
            lambda: 10.0,
            beta: 1.0,
            eps: DEFAULT_EPS,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.scale > 0.0
            && self.margin >= 0.0
            && self.lambda >= 0.0
            && self.beta > 0.0
            && self.eps > 0.0
            && [self.scale, self.margin, self.lambda, self.beta, self.eps]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid loss configuration {self:?}")))
        }
    }
}

/// A batch-mean loss and its gradient with respect to the differentiated
/// input (flattened in the input's layout).
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Target-class cosine after the margin, with its derivative in `cosθ`.
///
/// `cos(θ+m)` turns back up once `θ > π − m`, which lets a model lower the
/// loss by pushing samples to the far side of their own center. Past that
/// point the curve is continued by a unit-slope line, keeping it continuous
/// and strictly increasing.
pub fn margin_target(cos_theta: f64, margin: f64) -> (f64, f64) {
    let turn = -margin.cos();
    if margin > 0.0 && cos_theta < turn {
        (cos_theta - turn - 1.0, 1.0)
    } else {
        (
            cos_add_margin(cos_theta, margin),
            cos_add_margin_derivative(cos_theta, margin),
        )
    }
}

/// ArcFace loss over a row-major `N × C` cosine matrix.
///
/// The returned gradient is with respect to the cosine matrix.
pub fn arcface_loss(
    cosines: &[f64],
    classes: usize,
    labels: &[usize],
    scale: f64,
    margin: f64,
) -> Result<LossValue> {
    let n = labels.len();
    if classes == 0 || cosines.len() != n * classes {
        return Err(Error::Dimension {
            expected: n * classes,
            actual: cosines.len(),
        });
    }
    if n == 0 {
        return Err(Error::Config("empty batch".into()));
    }
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; cosines.len()];
    let mut logits = vec![0.0; classes];

    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Label { label: y, classes }.at_sample(i));
        }
        let row = &cosines[i * classes..(i + 1) * classes];
        let (target, slope) = margin_target(row[y], margin);
        for (j, (z, &c)) in logits.iter_mut().zip(row).enumerate() {
            *z = if j == y { scale * target } else { scale * c };
        }
        let (argmax, max) =
            logits.iter().copied().enumerate().fold(
                (0, f64::NEG_INFINITY),
                |b, (j, z)| if z > b.1 { (j, z) } else { b },
            );
        let rest: f64 = logits
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != argmax)
            .map(|(_, &z)| (z - max).exp())
            .sum();
        let log_sum = max + rest.ln_1p();
        total += log_sum - logits[y];

        let g = &mut grad[i * classes..(i + 1) * classes];
        for (j, (gj, &z)) in g.iter_mut().zip(&logits).enumerate() {
            let p = (z - log_sum).exp();
            *gj = if j == y {
                (p - 1.0) * scale * slope * inv_n
            } else {
                p * scale * inv_n
            };
        }
    }
    Ok(LossValue {
        value: total * inv_n,
        grad,
    })
}

/// Smooth-L1 between predictions and targets; gradient is with respect to
/// the predictions.
pub fn smooth_l1(prediction: &[f64], target: &[f64], beta: f64) -> Result<LossValue> {
    if prediction.len() != target.len() {
        return Err(Error::Dimension {
            expected: prediction.len(),
            actual: target.len(),
        });
    }
    if !(beta > 0.0) {
        return Err(Error::Config(format!("beta must be positive, got {beta}")));
    }
    if prediction.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let inv_n = 1.0 / prediction.len() as f64;
    let mut total = 0.0;
    let grad = prediction
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = t - p;
            if d.abs() < beta {
                total += 0.5 * d * d / beta;
                -d / beta * inv_n
            } else {
                total += d.abs() - 0.5 * beta;
                -d.signum() * inv_n
            }
        })
        .collect();
    Ok(LossValue {
        value: total * inv_n,
        grad,
    })
}

/// `arc + λ·reg`, with gradients weighted the same way.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedLoss {
    pub value: f64,
    pub arc_value: f64,
    pub reg_value: f64,
    /// Gradient with respect to the cosine matrix.
    pub grad_cosines: Vec<f64>,
    /// Gradient with respect to the quality predictions, already scaled by λ.
    pub grad_prediction: Vec<f64>,
}

pub fn combined_loss(arc: LossValue, cr_reg: LossValue, lambda: f64) -> Result<CombinedLoss> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    Ok(CombinedLoss {
        value: arc.value + lambda * cr_reg.value,
        arc_value: arc.value,
        reg_value: cr_reg.value,
        grad_cosines: arc.grad,
        grad_prediction: cr_reg.grad.into_iter().map(|g| lambda * g).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Plain softmax cross-entropy on `s`-scaled logits, written without the
    /// margin machinery.
    fn softmax_xent(cosines: &[f64], classes: usize, labels: &[usize], s: f64) -> f64 {
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &cosines[i * classes..(i + 1) * classes];
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) * s;
            let z: f64 = row.iter().map(|c| (s * c - mx).exp()).sum();
            total += -(s * row[y] - mx - z.ln());
        }
        total / labels.len() as f64
    }

    #[test]
    fn arcface_examples() {
        let l = arcface_loss(&[1.0, 0.0], 2, &[0], 2.0, 0.0).unwrap();
        assert!((l.value - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-15);
        assert!((l.value - 0.126928).abs() < 1e-6);

        let l = arcface_loss(&[0.3, 0.3], 2, &[1], 64.0, 0.0).unwrap();
        assert!((l.value - 2f64.ln()).abs() < 1e-12);
        let l = arcface_loss(&[0.1, 0.1, 0.1, 0.1], 4, &[2], 5.0, 0.0).unwrap();
        assert!((l.value - 4f64.ln()).abs() < 1e-12);

        let l = arcface_loss(&[1.0, 0.0], 2, &[0], 64.0, 0.5).unwrap();
        assert!(l.value.abs() < 1e-12);
        assert!(l.value >= 0.0);
    }

    #[test]
    fn arcface_rejects_bad_label() {
        assert!(matches!(
            arcface_loss(&[1.0, 0.0], 2, &[2], 64.0, 0.5),
            Err(Error::AtSample { index: 0, .. })
        ));
    }

    #[test]
    fn arcface_no_overflow_at_large_scale() {
        let l = arcface_loss(&[-1.0, 1.0, 1.0], 3, &[0], 64.0, 0.5).unwrap();
        assert!(l.value.is_finite() && l.value > 100.0);
        assert!(l.grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn zero_margin_is_softmax_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = rng.random_range(1..=8);
            let c = rng.random_range(2..=6);
            let cos: Vec<f64> = (0..n * c).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            let s = rng.random_range(1.0..64.0);
            let a = arcface_loss(&cos, c, &y, s, 0.0).unwrap().value;
            assert!((a - softmax_xent(&cos, c, &y, s)).abs() < 1e-10);
        }
    }

    #[test]
    fn arcface_decreases_in_target_cosine() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let c = rng.random_range(2..=5);
            let mut cos: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = rng.random_range(0..c);
            let lo = rng.random_range(-1.0..0.9);
            let hi = rng.random_range(lo + 0.01..0.99);
            cos[y] = lo;
            let a = arcface_loss(&cos, c, &[y], 16.0, 0.5).unwrap().value;
            cos[y] = hi;
            let b = arcface_loss(&cos, c, &[y], 16.0, 0.5).unwrap().value;
            assert!(b < a, "loss must fall as the target cosine rises");
        }
    }

    #[test]
    fn margin_target_is_continuous_past_the_turn() {
        for m in [0.1, 0.5, 1.0] {
            let turn = -f64::cos(m);
            let (above, _) = margin_target(turn + 1e-12, m);
            let (below, slope) = margin_target(turn - 1e-12, m);
            assert!((above - below).abs() < 1e-9);
            assert!((above + 1.0).abs() < 1e-9);
            assert_eq!(slope, 1.0);
            assert!(margin_target(-1.0, m).0 < -1.0);
        }
        assert_eq!(margin_target(-1.0, 0.0).0, -1.0);
    }

    #[test]
    fn antipodal_samples_are_penalized() {
        // every sample opposite all centers must not look like a solution
        let l = arcface_loss(&[-1.0, -1.0, -1.0], 3, &[0], 64.0, 0.5).unwrap();
        assert!(l.value > 3f64.ln());
    }

    #[test]
    fn smooth_l1_examples() {
        assert_eq!(smooth_l1(&[0.3], &[0.3], 1.0).unwrap().value, 0.0);
        assert_eq!(smooth_l1(&[0.0], &[0.5], 1.0).unwrap().value, 0.125);
        assert_eq!(smooth_l1(&[0.0], &[2.0], 1.0).unwrap().value, 1.5);
        assert_eq!(smooth_l1(&[2.0], &[0.0], 1.0).unwrap().value, 1.5);
        assert!(smooth_l1(&[0.0], &[0.0], 0.0).is_err());
        assert!(smooth_l1(&[0.0, 1.0], &[0.0], 1.0).is_err());
    }

    #[test]
    fn smooth_l1_branches_meet_at_beta() {
        for beta in [0.25f64, 0.5, 1.0, 2.0] {
            let quad = 0.5 * beta * beta / beta;
            let lin = beta - 0.5 * beta;
            assert!((quad - 0.5 * beta).abs() < 1e-12);
            assert!((lin - 0.5 * beta).abs() < 1e-12);
            let at = smooth_l1(&[0.0], &[beta], beta).unwrap();
            assert!((at.value - 0.5 * beta).abs() < 1e-12);
            let below = smooth_l1(&[0.0], &[beta - 1e-13], beta).unwrap();
            assert!((at.value - below.value).abs() < 1e-12);
            assert!((at.grad[0] - below.grad[0]).abs() < 1e-9);
        }
    }

    #[test]
    fn smooth_l1_gradient_signs() {
        let l = smooth_l1(&[0.0, 0.0, 0.0, 0.0], &[0.5, -0.5, 3.0, -3.0], 1.0).unwrap();
        assert_eq!(l.grad, vec![-0.125, 0.125, -0.25, 0.25]);
    }

    #[test]
    fn combined_examples() {
        let arc = LossValue {
            value: 1.0,
            grad: vec![0.5],
        };
        let reg = LossValue {
            value: 0.2,
            grad: vec![0.1],
        };
        let c = combined_loss(arc.clone(), reg.clone(), 10.0).unwrap();
        assert!((c.value - 3.0).abs() < 1e-15);
        assert_eq!(c.grad_prediction, vec![1.0]);
        let c0 = combined_loss(arc.clone(), reg, 0.0).unwrap();
        assert_eq!(c0.value, arc.value);
        let zero = LossValue {
            value: 0.0,
            grad: vec![],
        };
        assert_eq!(combined_loss(zero.clone(), zero, 10.0).unwrap().value, 0.0);
        assert!(combined_loss(arc.clone(), arc, -1.0).is_err());
    }

    #[test]
    fn defaults() {
        let c = LossConfig::default();
        assert_eq!(
            (c.scale, c.margin, c.lambda, c.beta, c.eps),
            (64.0, 0.5, 10.0, 1.0, 1e-9)
        );
        c.validate().unwrap();
    }
}
