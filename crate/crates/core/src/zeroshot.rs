//! Text prototypes, zero-shot prediction, and the calibration pre-pass that
//! seeds the admission thresholds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, l2_normalize, softmax_slice, ProbVector};

/// Conventional CLIP temperature.
pub const DEFAULT_TEMPERATURE: f64 = 0.01;

/// One unit-norm prototype per class plus the softmax temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct TextPrototypeBank {
    prototypes: Vec<Vec<f64>>,
    temperature: f64,
}

impl TextPrototypeBank {
    /// Averages each class's prompt embeddings and renormalizes.
    pub fn build<G, E>(groups: &[G], temperature: f64) -> Result<Self>
    where
        G: AsRef<[E]>,
        E: AsRef<[f64]>,
    {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::NonPositiveTemperature(temperature));
        }
        if groups.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut dim = None;
        let mut prototypes = Vec::with_capacity(groups.len());
        for (c, group) in groups.iter().enumerate() {
            let group = group.as_ref();
            if group.is_empty() {
                return Err(Error::EmptyClassGroup(c));
            }
            let d = *dim.get_or_insert(group[0].as_ref().len());
            let mut mean = vec![0.0; d];
            for e in group {
                let e = e.as_ref();
                if e.len() != d {
                    return Err(Error::DimMismatch {
                        expected: d,
                        got: e.len(),
                    });
                }
                mean.iter_mut().zip(e).for_each(|(m, x)| *m += x);
            }
            let inv = 1.0 / group.len() as f64;
            mean.iter_mut().for_each(|m| *m *= inv);
            prototypes.push(l2_normalize(&mean)?);
        }
        Ok(Self {
            prototypes,
            temperature,
        })
    }

    pub fn classes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn dim(&self) -> usize {
        self.prototypes[0].len()
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn prototype(&self, c: usize) -> &[f64] {
        &self.prototypes[c]
    }

    pub fn prototypes(&self) -> &[Vec<f64>] {
        &self.prototypes
    }

    /// `z·t_c / τ` for every class.
    pub fn logits(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                got: z.len(),
            });
        }
        Ok(self
            .prototypes
            .iter()
            .map(|t| dot(z, t) / self.temperature)
            .collect())
    }

    pub fn predict(&self, z: &[f64]) -> Result<ProbVector> {
        zeroshot_predict(z, self)
    }
}

/// Softmax over `z·t_c` at the bank temperature.
pub fn zeroshot_predict(z: &[f64], bank: &TextPrototypeBank) -> Result<ProbVector> {
    if z.len() != bank.dim() {
        return Err(Error::DimMismatch {
            expected: bank.dim(),
            got: z.len(),
        });
    }
    let sims: Vec<f64> = bank.prototypes.iter().map(|t| dot(z, t)).collect();
    softmax_slice(&sims, bank.temperature).map(ProbVector::from_raw)
}

/// Stream-level zero-shot confidence statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotStats {
    pub mean_max_prob: f64,
    pub mean_entropy: f64,
    pub sample_count: u64,
}

/// Mean max-probability and mean entropy of the zero-shot predictions for
/// each sample's clean view. Reduction order is the stream order.
pub fn calibrate_zero_shot_stats<I, E>(views: I, bank: &TextPrototypeBank) -> Result<ZeroShotStats>
where
    I: IntoIterator<Item = E>,
    E: AsRef<[f64]>,
{
    let mut sum_max = 0.0;
    let mut sum_entropy = 0.0;
    let mut n = 0u64;
    for z in views {
        let p = zeroshot_predict(z.as_ref(), bank)?;
        sum_max += p.max_prob();
        sum_entropy += p.entropy();
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyStream);
    }
    Ok(ZeroShotStats {
        mean_max_prob: sum_max / n as f64,
        mean_entropy: sum_entropy / n as f64,
        sample_count: n,
    })
}
