//! Class-center similarity (CCS), nearest-negative class-center similarity
//! (NNCCS) and the certainty ratio (CR) derived from them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, cosine_similarity};

/// Default denominator shift for [`certainty_ratio`].
pub const DEFAULT_EPS: f64 = 1e-9;

/// `C` unit-norm class centers of dimension `d`, stored row-major (row `j` is
/// the center `w_j`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCenterMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl ClassCenterMatrix {
    /// Builds from rows that are already unit norm (within `1e-9`).
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        let m = Self::unchecked(dim, data)?;
        for j in 0..m.num_classes() {
            let n = geometry::norm(m.center(j));
            if (n - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "class center {j} has norm {n}, expected 1"
                )));
            }
        }
        Ok(m)
    }

    /// Builds from arbitrary nonzero rows, normalizing each one.
    pub fn from_unnormalized(dim: usize, data: Vec<f64>) -> Result<Self> {
        let mut m = Self::unchecked(dim, data)?;
        m.renormalize()?;
        Ok(m)
    }

    fn unchecked(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::Dimension {
                expected: dim,
                actual: data.len(),
            });
        }
        let classes = data.len() / dim;
        if classes < 2 {
            return Err(Error::InsufficientClasses(classes));
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn center(&self, j: usize) -> &[f64] {
        &self.data[j * self.dim..(j + 1) * self.dim]
    }

    pub fn centers(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Raw parameter access for the optimizer. Callers must call
    /// [`renormalize`](Self::renormalize) afterwards.
    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn renormalize(&mut self) -> Result<()> {
        for row in self.data.chunks_exact_mut(self.dim) {
            geometry::l2_normalize_in_place(row)?;
        }
        Ok(())
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.num_classes() {
            return Err(Error::Label {
                label,
                classes: self.num_classes(),
            });
        }
        Ok(())
    }
}

/// Per-sample classifiability triple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifiabilityRecord {
    pub ccs: f64,
    pub nnccs: f64,
    pub cr: f64,
    pub label: usize,
    /// Index of the nearest negative center.
    pub nearest_negative: usize,
}

/// Cosine between `x` and its own class center.
pub fn ccs(x: &[f64], centers: &ClassCenterMatrix, label: usize) -> Result<f64> {
    centers.check_label(label)?;
    cosine_similarity(x, centers.center(label))
}

/// Maximum cosine between `x` and any center other than `label`, together
/// with the index of that center. Ties resolve to the lowest index.
pub fn nnccs(x: &[f64], centers: &ClassCenterMatrix, label: usize) -> Result<(f64, usize)> {
    let classes = centers.num_classes();
    if classes < 2 {
        return Err(Error::InsufficientClasses(classes));
    }
    centers.check_label(label)?;
    let mut best = (f64::NEG_INFINITY, usize::MAX);
    for (j, w) in centers.centers().enumerate() {
        if j == label {
            continue;
        }
        let c = cosine_similarity(x, w)?;
        if c > best.0 {
            best = (c, j);
        }
    }
    Ok(best)
}

/// `ccs / (nnccs + 1 + eps)`.
///
/// `nnccs + 1` is formed first: it is exact near `nnccs = -1`, so the
/// `(1, -1)` limit evaluates to `1 / eps` without cancellation error.
#[inline]
pub fn certainty_ratio(ccs: f64, nnccs: f64, eps: f64) -> f64 {
    ccs / ((nnccs + 1.0) + eps)
}

/// CCS / NNCCS / CR straight from a row of cosines against every center.
pub fn record_from_cosines(cosines: &[f64], label: usize, eps: f64) -> Result<ClassifiabilityRecord> {
    let classes = cosines.len();
    if classes < 2 {
        return Err(Error::InsufficientClasses(classes));
    }
    if label >= classes {
        return Err(Error::Label { label, classes });
    }
    let ccs = cosines[label];
    let (nnccs, nearest_negative) = cosines.iter().enumerate().filter(|&(j, _)| j != label).fold(
        (f64::NEG_INFINITY, usize::MAX),
        |best, (j, &c)| {
            if c > best.0 {
                (c, j)
            } else {
                best
            }
        },
    );
    Ok(ClassifiabilityRecord {
        ccs,
        nnccs,
        cr: certainty_ratio(ccs, nnccs, eps),
        label,
        nearest_negative,
    })
}

pub fn classify_one(
    x: &[f64],
    centers: &ClassCenterMatrix,
    label: usize,
    eps: f64,
) -> Result<ClassifiabilityRecord> {
    let ccs = ccs(x, centers, label)?;
    let (nnccs, nearest_negative) = nnccs(x, centers, label)?;
    Ok(ClassifiabilityRecord {
        ccs,
        nnccs,
        cr: certainty_ratio(ccs, nnccs, eps),
        label,
        nearest_negative,
    })
}

/// Classifiability of every sample against fixed centers.
pub fn batch_classifiability<E: AsRef<[f64]>>(
    embeddings: &[E],
    labels: &[usize],
    centers: &ClassCenterMatrix,
    eps: f64,
) -> Result<Vec<ClassifiabilityRecord>> {
    if embeddings.len() != labels.len() {
        return Err(Error::Dimension {
            expected: embeddings.len(),
            actual: labels.len(),
        });
    }
    if embeddings.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    embeddings
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (x, &y))| classify_one(x.as_ref(), centers, y, eps).map_err(|e| e.at_sample(i)))
        .collect()
}
