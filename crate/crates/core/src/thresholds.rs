//! Per-class curriculum thresholds.
//!
//! Each class keeps a cumulative count of confident predictions. On refresh
//! the counts are max-normalized into a learning-status score `σ(c)`, the
//! per-class metric decays as `m ← clamp(σ·m, m_floor, 1)`, and the threshold
//! moves by EMA toward the curriculum target derived from `m` and the
//! zero-shot initial threshold. Classes that are absent or scarce in the
//! cache are relaxed multiplicatively by the adaptation rate.
//!
//! Relaxation always points toward admitting more samples: probability
//! thresholds shrink, entropy thresholds grow (capped at `2·ln C`). The
//! `literal_adapt` switch instead multiplies by the same factor under both
//! strategies.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::zeroshot::ZeroShotStats;
use crate::Strategy;

/// Thresholds never drop below this, so they stay strictly positive.
pub const MIN_THRESHOLD: f64 = 1e-12;

/// Classes with at most this many cached entries count as rarely seen.
pub const RARE_LIMIT: u64 = 10;

/// Initial probability threshold when zero-shot initialization is off.
pub const FALLBACK_PROBABILITY: f64 = 0.5;
/// Initial entropy threshold, as a fraction of `ln C`, when zero-shot
/// initialization is off.
pub const FALLBACK_ENTROPY_FRACTION: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdParams {
    /// EMA factor.
    pub delta: f64,
    /// Rarity adaptation rate.
    pub gamma: f64,
    pub m_floor: f64,
    pub literal_adapt: bool,
}

impl Default for ThresholdParams {
    fn default() -> Self {
        Self {
            delta: 0.95,
            gamma: 0.02,
            m_floor: 0.1,
            literal_adapt: false,
        }
    }
}

impl ThresholdParams {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |x: f64| x > 0.0 && x < 1.0;
        if !open_unit(self.delta) {
            return Err(Error::InvalidParams(format!("delta {} not in (0,1)", self.delta)));
        }
        if !open_unit(self.gamma) {
            return Err(Error::InvalidParams(format!("gamma {} not in (0,1)", self.gamma)));
        }
        if !open_unit(self.m_floor) {
            return Err(Error::InvalidParams(format!(
                "m_floor {} not in (0,1)",
                self.m_floor
            )));
        }
        Ok(())
    }
}

/// One class's values at a refresh, for trace output.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTraceRow {
    pub t: u64,
    pub class: usize,
    pub threshold: f64,
    pub sigma: f64,
    pub m: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdState {
    strategy: Strategy,
    params: ThresholdParams,
    thresholds: Vec<f64>,
    initial: Vec<f64>,
    sigma_raw: Vec<u64>,
    sigma: Vec<f64>,
    metric: Vec<f64>,
    cap: f64,
    step: u64,
}

impl ThresholdState {
    /// Starts every class at the same initial threshold.
    pub fn with_initial(
        classes: usize,
        strategy: Strategy,
        initial: f64,
        params: ThresholdParams,
    ) -> Result<Self> {
        params.validate()?;
        if classes < 2 {
            return Err(Error::InvalidParams(format!("need >= 2 classes, got {classes}")));
        }
        if !initial.is_finite() {
            return Err(Error::InvalidParams(format!("initial threshold {initial}")));
        }
        let cap = entropy_cap(classes);
        let t0 = match strategy {
            Strategy::Probability => initial.clamp(MIN_THRESHOLD, 1.0),
            Strategy::Entropy => initial.clamp(MIN_THRESHOLD, cap),
        };
        Ok(Self {
            strategy,
            params,
            thresholds: vec![t0; classes],
            initial: vec![t0; classes],
            sigma_raw: vec![0; classes],
            sigma: vec![0.0; classes],
            metric: vec![1.0; classes],
            cap,
            step: 0,
        })
    }

    /// Seeds thresholds from the zero-shot pre-pass: mean max-probability for
    /// the probability strategy, mean entropy for the entropy strategy.
    pub fn init_from_stats(
        stats: &ZeroShotStats,
        classes: usize,
        strategy: Strategy,
        params: ThresholdParams,
    ) -> Result<Self> {
        let initial = match strategy {
            Strategy::Probability => stats.mean_max_prob,
            Strategy::Entropy => stats.mean_entropy,
        };
        Self::with_initial(classes, strategy, initial, params)
    }

    /// Fixed neutral start used when zero-shot initialization is disabled.
    pub fn init_fallback(classes: usize, strategy: Strategy, params: ThresholdParams) -> Result<Self> {
        let initial = match strategy {
            Strategy::Probability => FALLBACK_PROBABILITY,
            Strategy::Entropy => FALLBACK_ENTROPY_FRACTION * (classes as f64).ln(),
        };
        Self::with_initial(classes, strategy, initial, params)
    }

    pub fn classes(&self) -> usize {
        self.thresholds.len()
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn params(&self) -> &ThresholdParams {
        &self.params
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn sigma_raw(&self) -> &[u64] {
        &self.sigma_raw
    }

    /// Normalized σ from the most recent refresh.
    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn metric(&self) -> &[f64] {
        &self.metric
    }

    pub fn cap(&self) -> f64 {
        self.cap
    }

    /// Number of predictions recorded so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    fn check_class(&self, c: usize) -> Result<()> {
        if c >= self.classes() {
            return Err(Error::ClassOutOfRange {
                class: c,
                classes: self.classes(),
            });
        }
        Ok(())
    }

    pub fn admission_threshold(&self, c: usize) -> Result<f64> {
        self.check_class(c)?;
        Ok(self.thresholds[c])
    }

    /// Counts the prediction toward `σ(c)` when it clears the current
    /// threshold of its predicted class. Returns whether it counted.
    pub fn record_prediction(&mut self, c: usize, max_prob: f64, entropy: f64) -> Result<bool> {
        self.check_class(c)?;
        self.step += 1;
        let confident = match self.strategy {
            Strategy::Probability => max_prob >= self.thresholds[c],
            Strategy::Entropy => entropy <= self.thresholds[c],
        };
        if confident {
            self.sigma_raw[c] += 1;
        }
        Ok(confident)
    }

    /// Max-normalizes the counts, decays the metric, and applies one EMA step
    /// toward the curriculum target. Counts are cumulative and not reset.
    pub fn refresh_thresholds(&mut self) {
        self.sigma = normalize_counts(&self.sigma_raw);
        let ThresholdParams {
            delta,
            m_floor,
            literal_adapt,
            ..
        } = self.params;
        for c in 0..self.classes() {
            let m = (self.sigma[c] * self.metric[c]).clamp(m_floor, 1.0);
            self.metric[c] = m;
            let target = match (self.strategy, literal_adapt) {
                (Strategy::Probability, _) | (Strategy::Entropy, true) => m * self.initial[c],
                (Strategy::Entropy, false) => self.initial[c] / m,
            };
            let next = delta * self.thresholds[c] + (1.0 - delta) * target;
            self.thresholds[c] = self.bound(next);
        }
    }

    /// Relaxes never-seen (`count = 0`) classes by `1 − γ` and rarely-seen
    /// (`1 ≤ count ≤ 10`) classes by `1 − γ/2`.
    pub fn apply_rarity_adaptation(&mut self, counts: &[u64]) -> Result<()> {
        if counts.len() != self.classes() {
            return Err(Error::DimMismatch {
                expected: self.classes(),
                got: counts.len(),
            });
        }
        let gamma = self.params.gamma;
        for (c, &count) in counts.iter().enumerate() {
            let r = rarity_factor(count, gamma);
            if r == 1.0 {
                continue;
            }
            let next = match (self.strategy, self.params.literal_adapt) {
                (Strategy::Probability, _) | (Strategy::Entropy, true) => self.thresholds[c] * r,
                (Strategy::Entropy, false) => self.thresholds[c] / r,
            };
            self.thresholds[c] = self.bound(next);
        }
        Ok(())
    }

    fn bound(&self, t: f64) -> f64 {
        match self.strategy {
            Strategy::Probability => t.clamp(MIN_THRESHOLD, 1.0),
            Strategy::Entropy => t.clamp(MIN_THRESHOLD, self.cap),
        }
    }

    /// Current values as trace rows stamped with the step counter.
    pub fn trace_rows(&self) -> Vec<ThresholdTraceRow> {
        (0..self.classes())
            .map(|c| ThresholdTraceRow {
                t: self.step,
                class: c,
                threshold: self.thresholds[c],
                sigma: self.sigma[c],
                m: self.metric[c],
            })
            .collect()
    }
}

/// `2·ln C`, the ceiling for entropy thresholds.
pub fn entropy_cap(classes: usize) -> f64 {
    2.0 * (classes as f64).ln()
}

pub fn rarity_factor(count: u64, gamma: f64) -> f64 {
    match count {
        0 => 1.0 - gamma,
        1..=RARE_LIMIT => 1.0 - gamma * 0.5,
        _ => 1.0,
    }
}

/// `σ(c) = raw(c) / max raw`, all zeros when nothing has been counted.
pub fn normalize_counts(raw: &[u64]) -> Vec<f64> {
    let max = raw.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return vec![0.0; raw.len()];
    }
    raw.iter().map(|&r| r as f64 / max as f64).collect()
}
