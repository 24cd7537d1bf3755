//! Dense-vector primitives shared by every stage of the pipeline.
//!
//! Everything here accumulates in `f64` even though features are stored as
//! `f32` on disk. Ties are always broken toward the lowest index.

use crate::error::{Error, Result};

/// Norms below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

/// Probabilities are clamped to this floor before taking a logarithm.
pub const LOG_FLOOR: f64 = 1e-30;

/// Tolerance on `Σp = 1` accepted by [`entropy`].
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-4;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Returns `v / ‖v‖`.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !n.is_finite() {
        return Err(Error::NonFinite);
    }
    if n < ZERO_NORM {
        return Err(Error::ZeroVector);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// A dense vector in the shared image/text latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput);
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self(values))
    }

    pub fn from_f32(values: &[f32]) -> Result<Self> {
        Self::new(values.iter().map(|&x| f64::from(x)).collect())
    }

    pub fn normalized(&self) -> Result<Self> {
        l2_normalize(&self.0).map(Self)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Unbounded per-class scores.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits(Vec<f64>);

impl Logits {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::EmptyInput);
        }
        if scores.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self(scores))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax_stable(&self.0).expect("logits are non-empty")
    }
}

/// A categorical distribution over classes.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates non-negativity and `Σp = 1` within [`DISTRIBUTION_TOLERANCE`].
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        validate_distribution(&probs)?;
        Ok(Self(probs))
    }

    /// Wraps values produced by code that already guarantees a distribution.
    pub(crate) fn from_raw(probs: Vec<f64>) -> Self {
        debug_assert!(validate_distribution(&probs).is_ok());
        Self(probs)
    }

    /// Arithmetic mean of several distributions over the same classes.
    pub fn mean<'a>(items: impl IntoIterator<Item = &'a ProbVector>) -> Result<Self> {
        let mut acc: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for p in items {
            if acc.is_empty() {
                acc = vec![0.0; p.len()];
            } else if acc.len() != p.len() {
                return Err(Error::DimMismatch {
                    expected: acc.len(),
                    got: p.len(),
                });
            }
            for (a, x) in acc.iter_mut().zip(&p.0) {
                *a += x;
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::EmptyInput);
        }
        let inv = 1.0 / count as f64;
        acc.iter_mut().for_each(|a| *a *= inv);
        Ok(Self(acc))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax_stable(&self.0).expect("distributions are non-empty")
    }

    pub fn max_prob(&self) -> f64 {
        self.0[self.argmax()]
    }

    pub fn entropy(&self) -> f64 {
        entropy_unchecked(&self.0)
    }
}

fn validate_distribution(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(x) = p.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(Error::InvalidDistribution(format!("entry {x} is negative or non-finite")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > DISTRIBUTION_TOLERANCE {
        return Err(Error::InvalidDistribution(format!("entries sum to {sum}")));
    }
    Ok(())
}

/// Temperature-scaled softmax with max subtraction.
pub fn softmax(logits: &Logits, temperature: f64) -> Result<ProbVector> {
    softmax_slice(logits.as_slice(), temperature).map(ProbVector::from_raw)
}

pub(crate) fn softmax_slice(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::NonPositiveTemperature(temperature));
    }
    if logits.is_empty() {
        return Err(Error::EmptyInput);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::NonFinite);
    }
    let mut out: Vec<f64> = logits
        .iter()
        .map(|l| ((l - max) / temperature).exp())
        .collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= z);
    Ok(out)
}

/// Shannon entropy in nats, with `0·log 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    validate_distribution(p)?;
    Ok(entropy_unchecked(p))
}

pub(crate) fn entropy_unchecked(p: &[f64]) -> f64 {
    let h: f64 = p
        .iter()
        .map(|&x| if x <= 0.0 { 0.0 } else { -x * x.max(LOG_FLOOR).ln() })
        .sum();
    // Rounding can push the sum a hair outside [0, ln C].
    h.clamp(0.0, (p.len() as f64).ln())
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax_stable(values: &[f64]) -> Result<usize> {
    let mut iter = values.iter().enumerate();
    let (mut best, mut best_val) = match iter.next() {
        Some((i, v)) => (i, *v),
        None => return Err(Error::EmptyInput),
    };
    for (i, &v) in iter {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    Ok(best)
}

/// Cache affinity `α·exp(−β·(1 − s))`.
#[inline]
pub fn modulation(similarity: f64, alpha: f64, beta: f64) -> f64 {
    alpha * (-beta * (1.0 - similarity)).exp()
}
