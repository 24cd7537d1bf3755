//! Per-class bounded priority caches keyed by prediction entropy.
//!
//! Each class slot is a vector sorted by `(entropy_key, seq)`. On overflow the
//! last entry goes: highest entropy, newest among equal keys.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{l2_normalize, ProbVector};
use crate::Strategy;

/// Paper-default queue size per class.
pub const DEFAULT_CAPACITY: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct CacheEntry {
    pub feature: Vec<f64>,
    pub pseudo_label: usize,
    pub entropy_key: f64,
    /// Insertion counter, unique per cache.
    pub seq: u64,
    /// Index of the stream sample the feature came from.
    pub sample: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum AdmitOutcome {
    Admitted,
    /// The gate passed but the slot overflowed. The evicted entry may be the
    /// one just offered.
    AdmittedWithEviction {
        evicted_entropy: f64,
        evicted_seq: u64,
    },
    Rejected,
}

impl AdmitOutcome {
    pub fn passed_gate(&self) -> bool {
        !matches!(self, AdmitOutcome::Rejected)
    }

    pub fn evicted(&self) -> bool {
        matches!(self, AdmitOutcome::AdmittedWithEviction { .. })
    }
}

/// Admission gate: `max p ≥ T` for probability, `H(p) ≤ T` for entropy.
pub fn passes_gate(probs: &ProbVector, threshold: f64, strategy: Strategy) -> Result<bool> {
    if threshold.is_nan() {
        return Err(Error::InvalidThreshold);
    }
    Ok(match strategy {
        Strategy::Probability => probs.max_prob() >= threshold,
        Strategy::Entropy => probs.entropy() <= threshold,
    })
}

#[derive(Clone, Debug)]
pub struct ClassCache {
    capacity: usize,
    slots: Vec<Vec<CacheEntry>>,
    next_seq: u64,
}

impl ClassCache {
    pub fn new(classes: usize, capacity: usize) -> Self {
        Self {
            capacity,
            slots: vec![Vec::new(); classes],
            next_seq: 0,
        }
    }

    pub fn classes(&self) -> usize {
        self.slots.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Offers a feature to the slot of `pseudo_label`.
    ///
    /// With capacity 0 nothing can be stored and every offer is rejected.
    pub fn try_admit(
        &mut self,
        feature: &[f64],
        pseudo_label: usize,
        probs: &ProbVector,
        threshold: f64,
        strategy: Strategy,
        sample: u64,
    ) -> Result<AdmitOutcome> {
        if pseudo_label >= self.slots.len() {
            return Err(Error::ClassOutOfRange {
                class: pseudo_label,
                classes: self.slots.len(),
            });
        }
        if !passes_gate(probs, threshold, strategy)? || self.capacity == 0 {
            return Ok(AdmitOutcome::Rejected);
        }
        let entry = CacheEntry {
            feature: feature.to_vec(),
            pseudo_label,
            entropy_key: probs.entropy(),
            seq: self.next_seq,
            sample,
        };
        self.next_seq += 1;
        Ok(self.insert(entry))
    }

    fn insert(&mut self, entry: CacheEntry) -> AdmitOutcome {
        let slot = &mut self.slots[entry.pseudo_label];
        // seq is the largest so far, so it sorts after every equal key
        let at = slot.partition_point(|e| e.entropy_key <= entry.entropy_key);
        slot.insert(at, entry);
        if slot.len() > self.capacity {
            let evicted = slot.pop().expect("slot is non-empty");
            AdmitOutcome::AdmittedWithEviction {
                evicted_entropy: evicted.entropy_key,
                evicted_seq: evicted.seq,
            }
        } else {
            AdmitOutcome::Admitted
        }
    }

    pub fn entries(&self, class: usize) -> &[CacheEntry] {
        &self.slots[class]
    }

    /// All entries, class-major, each class in priority order.
    pub fn iter(&self) -> impl Iterator<Item = &CacheEntry> {
        self.slots.iter().flatten()
    }

    pub fn contains_seq(&self, seq: u64) -> bool {
        self.iter().any(|e| e.seq == seq)
    }

    /// Normalized mean of the stored features, `None` for an empty slot (or a
    /// slot whose features cancel out).
    pub fn visual_prototype(&self, class: usize) -> Option<Vec<f64>> {
        let slot = self.slots.get(class)?;
        let first = slot.first()?;
        let mut mean = vec![0.0; first.feature.len()];
        for e in slot {
            mean.iter_mut().zip(&e.feature).for_each(|(m, x)| *m += x);
        }
        let inv = 1.0 / slot.len() as f64;
        mean.iter_mut().for_each(|m| *m *= inv);
        l2_normalize(&mean).ok()
    }

    /// Current occupancy per class.
    pub fn class_counts(&self) -> Vec<u64> {
        self.slots.iter().map(|s| s.len() as u64).collect()
    }

    pub fn len(&self) -> usize {
        self.slots.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fraction of cached entries whose pseudo-label matches the true label of
    /// their source sample. `None` without labels or with an empty cache.
    pub fn cache_accuracy(&self, labels: Option<&[u32]>) -> Option<f64> {
        let labels = labels?;
        let total = self.len();
        if total == 0 {
            return None;
        }
        let correct = self
            .iter()
            .filter(|e| {
                labels
                    .get(e.sample as usize)
                    .is_some_and(|&l| l as usize == e.pseudo_label)
            })
            .count();
        Some(correct as f64 / total as f64)
    }
}
