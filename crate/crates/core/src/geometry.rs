//! Vector operations on the embedding hypersphere.
//!
//! Everything here works on plain `&[f64]` slices so callers can pass rows of
//! larger buffers without copying. [`EmbeddingVector`] is the owned form used
//! at API boundaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An owned feature vector of dimension `d >= 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Dimension {
                expected: 2,
                actual: values.len(),
            });
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn l2_normalize(&self) -> Result<Self> {
        l2_normalize(&self.0).map(Self)
    }

    pub fn cosine_similarity(&self, other: &Self) -> Result<f64> {
        cosine_similarity(&self.0, &other.0)
    }
}

impl AsRef<[f64]> for EmbeddingVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Returns `v / ‖v‖₂`.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Normalization);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// In-place variant of [`l2_normalize`]; returns the original norm.
pub fn l2_normalize_in_place(v: &mut [f64]) -> Result<f64> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Normalization);
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(n)
}

/// `⟨a,b⟩ / (‖a‖‖b‖)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Normalization);
    }
    Ok(clamp_cosine(dot(a, b) / (na * nb)))
}

#[inline]
pub fn clamp_cosine(c: f64) -> f64 {
    c.clamp(-1.0, 1.0)
}

/// `cos(arccos(c) + m)` through the angle-addition identity.
///
/// No easy-margin fallback: when `θ + m > π` the identity is still applied.
#[inline]
pub fn cos_add_margin(cos_theta: f64, margin: f64) -> f64 {
    let c = clamp_cosine(cos_theta);
    let s = (1.0 - c * c).max(0.0).sqrt();
    c * margin.cos() - s * margin.sin()
}

/// Derivative of [`cos_add_margin`] with respect to `cos_theta`.
///
/// `sinθ` is floored at `1e-12` so the value stays finite at `cosθ = ±1`.
#[inline]
pub fn cos_add_margin_derivative(cos_theta: f64, margin: f64) -> f64 {
    let c = clamp_cosine(cos_theta);
    let s = (1.0 - c * c).max(0.0).sqrt().max(1e-12);
    margin.cos() + c * margin.sin() / s
}
