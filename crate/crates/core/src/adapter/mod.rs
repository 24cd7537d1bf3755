//! Residual optimization of the text and visual prototypes.
//!
//! Per test sample the residuals start at zero, the augmented views are scored
//! under the fused (text + cache) logits, the most confident views are
//! averaged into `P_ACE`, and one AdamW step is taken on
//! `H(P_ACE) + λ·L_align` before the residuals are folded back into the
//! prototypes with renormalization.

pub mod adamw;
pub mod gradcheck;
mod objective;

use serde::{Deserialize, Serialize};

pub use adamw::{adamw_step, AdamWConfig, OptimizerState};
pub use gradcheck::{finite_difference_check, GradCheckReport, InstanceSpec};
pub use objective::{compute_gradients, total_objective, Evaluation};

use crate::error::{Error, Result};
use crate::numerics::{dot, entropy, l2_normalize, modulation, softmax_slice, Logits, ProbVector};
use crate::zeroshot::TextPrototypeBank;
use crate::Strategy;

/// How views are kept before averaging into `P_ACE`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum ViewFilter {
    /// Keep the `⌈ρ·V⌉` most confident views.
    TopFraction(f64),
    /// Keep views with entropy `≤ T` (entropy strategy) or max-probability
    /// `≥ T` (probability strategy). Falls back to the single most confident
    /// view when none qualify.
    FixedThreshold(f64),
}

impl Default for ViewFilter {
    fn default() -> Self {
        ViewFilter::TopFraction(0.1)
    }
}

/// Hyperparameters of the fused logits and the objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
}

impl Default for AdapterParams {
    fn default() -> Self {
        Self {
            alpha: 6.0,
            beta: 5.0,
            lambda: 0.5,
        }
    }
}

/// Text prototypes for every class, visual prototypes where the cache has
/// entries, and the logit temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    text: Vec<Vec<f64>>,
    visual: Vec<Option<Vec<f64>>>,
    temperature: f64,
}

impl PrototypeBank {
    pub fn new(text: Vec<Vec<f64>>, visual: Vec<Option<Vec<f64>>>, temperature: f64) -> Result<Self> {
        if text.is_empty() {
            return Err(Error::EmptyInput);
        }
        if text.len() != visual.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} text prototypes but {} visual slots",
                text.len(),
                visual.len()
            )));
        }
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::NonPositiveTemperature(temperature));
        }
        let d = text[0].len();
        for row in text.iter().chain(visual.iter().flatten()) {
            if row.len() != d {
                return Err(Error::DimMismatch {
                    expected: d,
                    got: row.len(),
                });
            }
        }
        Ok(Self {
            text,
            visual,
            temperature,
        })
    }

    /// Starts from zero-shot text prototypes with no visual prototypes.
    pub fn from_text(bank: &TextPrototypeBank) -> Self {
        Self {
            text: bank.prototypes().to_vec(),
            visual: vec![None; bank.classes()],
            temperature: bank.temperature(),
        }
    }

    pub fn classes(&self) -> usize {
        self.text.len()
    }

    pub fn dim(&self) -> usize {
        self.text[0].len()
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn text(&self, c: usize) -> &[f64] {
        &self.text[c]
    }

    pub fn visual(&self, c: usize) -> Option<&[f64]> {
        self.visual[c].as_deref()
    }

    pub fn set_visual(&mut self, c: usize, v: Option<Vec<f64>>) {
        self.visual[c] = v;
    }

    pub fn present(&self) -> Vec<usize> {
        (0..self.classes()).filter(|&c| self.visual[c].is_some()).collect()
    }

    /// Returns the bank with `t_c ← (t_c + t̂_c)/‖·‖` and likewise for present
    /// visual prototypes. Fails on the first class whose sum vanishes.
    pub fn with_residuals(&self, residuals: &Residuals) -> Result<Self> {
        residuals.check_shape(self.classes(), self.dim())?;
        let mut out = self.clone();
        for c in 0..self.classes() {
            out.text[c] = normalized_sum(&self.text[c], residuals.text(c)).ok_or(Error::DegenerateSum(c))?;
            if let Some(v) = &self.visual[c] {
                out.visual[c] = Some(normalized_sum(v, residuals.visual(c)).ok_or(Error::DegenerateSum(c))?);
            }
        }
        Ok(out)
    }
}

fn normalized_sum(base: &[f64], delta: &[f64]) -> Option<Vec<f64>> {
    let sum: Vec<f64> = base.iter().zip(delta).map(|(a, b)| a + b).collect();
    l2_normalize(&sum).ok()
}

/// Learnable offsets `t̂` and `v̂`, flattened as `[text rows.., visual rows..]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Residuals {
    classes: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Residuals {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            classes,
            dim,
            data: vec![0.0; 2 * classes * dim],
        }
    }

    pub fn from_flat(classes: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 2 * classes * dim {
            return Err(Error::ShapeMismatch(format!(
                "expected {} residual values, got {}",
                2 * classes * dim,
                data.len()
            )));
        }
        Ok(Self { classes, dim, data })
    }

    fn check_shape(&self, classes: usize, dim: usize) -> Result<()> {
        if self.classes != classes || self.dim != dim {
            return Err(Error::ShapeMismatch(format!(
                "residuals are {}×{}, prototypes {classes}×{dim}",
                self.classes, self.dim
            )));
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn text(&self, c: usize) -> &[f64] {
        &self.data[c * self.dim..(c + 1) * self.dim]
    }

    pub fn visual(&self, c: usize) -> &[f64] {
        let off = self.classes * self.dim;
        &self.data[off + c * self.dim..off + (c + 1) * self.dim]
    }

    pub fn text_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.data[c * self.dim..(c + 1) * self.dim]
    }

    pub fn visual_mut(&mut self, c: usize) -> &mut [f64] {
        let off = self.classes * self.dim;
        &mut self.data[off + c * self.dim..off + (c + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// `z·t_c/τ + F(z·v_c)` where a visual prototype exists, `z·t_c/τ` otherwise.
pub fn fused_logits(z: &[f64], bank: &PrototypeBank, alpha: f64, beta: f64) -> Result<Logits> {
    if z.len() != bank.dim() {
        return Err(Error::DimMismatch {
            expected: bank.dim(),
            got: z.len(),
        });
    }
    let scores = (0..bank.classes())
        .map(|c| {
            let text = dot(z, &bank.text[c]) / bank.temperature;
            match &bank.visual[c] {
                Some(v) => text + modulation(dot(z, v), alpha, beta),
                None => text,
            }
        })
        .collect();
    Logits::new(scores)
}

/// Prototype prediction `softmax(fused_logits)`. The temperature is already
/// folded into the logits.
pub fn proto_predict(z: &[f64], bank: &PrototypeBank, alpha: f64, beta: f64) -> Result<ProbVector> {
    let logits = fused_logits(z, bank, alpha, beta)?;
    softmax_slice(logits.as_slice(), 1.0).map(ProbVector::from_raw)
}

/// One sample's views with their prototype predictions.
#[derive(Clone, Debug)]
pub struct ViewBatch {
    pub views: Vec<Vec<f64>>,
    pub probs: Vec<ProbVector>,
    pub entropies: Vec<f64>,
}

impl ViewBatch {
    pub fn score(views: Vec<Vec<f64>>, bank: &PrototypeBank, params: &AdapterParams) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let probs = views
            .iter()
            .map(|z| proto_predict(z, bank, params.alpha, params.beta))
            .collect::<Result<Vec<_>>>()?;
        let entropies = probs.iter().map(ProbVector::entropy).collect();
        Ok(Self {
            views,
            probs,
            entropies,
        })
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}

/// `⌈ρ·V⌉`, at least one and at most `V`.
pub fn retained_count(rho: f64, views: usize) -> usize {
    // the epsilon keeps ρ·V = 3.0000000000000004 from rounding up to 4
    let k = (rho * views as f64 - 1e-9).ceil();
    (k.max(1.0) as usize).min(views)
}

/// Selects confident views and averages their predictions into `P_ACE`.
/// Ties in confidence resolve toward the lower view index.
pub fn filter_views(
    batch: &ViewBatch,
    strategy: Strategy,
    filter: ViewFilter,
) -> Result<(Vec<usize>, ProbVector)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    // lower score = more confident
    let score = |i: usize| match strategy {
        Strategy::Entropy => batch.entropies[i],
        Strategy::Probability => -batch.probs[i].max_prob(),
    };
    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.sort_by(|&a, &b| score(a).total_cmp(&score(b)).then(a.cmp(&b)));

    let mut selected: Vec<usize> = match filter {
        ViewFilter::TopFraction(rho) => {
            if !(rho > 0.0 && rho <= 1.0) {
                return Err(Error::InvalidParams(format!("rho {rho} not in (0,1]")));
            }
            order[..retained_count(rho, batch.len())].to_vec()
        }
        ViewFilter::FixedThreshold(t) => {
            let keep: Vec<usize> = (0..batch.len())
                .filter(|&i| match strategy {
                    Strategy::Entropy => batch.entropies[i] <= t,
                    Strategy::Probability => batch.probs[i].max_prob() >= t,
                })
                .collect();
            if keep.is_empty() {
                vec![order[0]]
            } else {
                keep
            }
        }
    };
    selected.sort_unstable();
    let p = ProbVector::mean(selected.iter().map(|&i| &batch.probs[i]))?;
    Ok((selected, p))
}

/// Entropy of the averaged view prediction.
pub fn aug_loss(p_ace: &ProbVector) -> Result<f64> {
    entropy(p_ace.as_slice())
}

/// Bidirectional contrastive alignment between text and visual prototypes,
/// averaged over the classes that have a visual prototype.
pub fn align_loss(bank: &PrototypeBank) -> Result<f64> {
    let present = bank.present();
    if present.is_empty() {
        return Err(Error::NoVisualPrototypes);
    }
    let text: Vec<&[f64]> = present.iter().map(|&c| bank.text(c)).collect();
    let visual: Vec<&[f64]> = present.iter().map(|&c| bank.visual(c).unwrap()).collect();
    Ok(objective::align_terms(&text, &visual).loss)
}

/// Folds residuals into the bank in place and zeroes them. Classes whose sum
/// vanishes keep their previous prototype and are returned.
pub fn apply_residuals(bank: &mut PrototypeBank, residuals: &mut Residuals) -> Result<Vec<usize>> {
    residuals.check_shape(bank.classes(), bank.dim())?;
    let mut degenerate = Vec::new();
    for c in 0..bank.classes() {
        let mut bad = false;
        match normalized_sum(&bank.text[c], residuals.text(c)) {
            Some(t) => bank.text[c] = t,
            None => bad = true,
        }
        if let Some(v) = bank.visual[c].as_mut() {
            match normalized_sum(v, residuals.visual(c)) {
                Some(nv) => *v = nv,
                None => bad = true,
            }
        }
        if bad {
            degenerate.push(c);
        }
    }
    residuals.as_mut_slice().iter_mut().for_each(|x| *x = 0.0);
    Ok(degenerate)
}

/// True when every prototype row has unit norm within `tol`.
pub fn prototypes_unit_norm(bank: &PrototypeBank, tol: f64) -> bool {
    bank.text
        .iter()
        .chain(bank.visual.iter().flatten())
        .all(|r| (dot(r, r).sqrt() - 1.0).abs() <= tol)
}
