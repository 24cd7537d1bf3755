//! Central-difference check of the analytic residual gradient on random
//! small instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{compute_gradients, filter_views, total_objective, AdapterParams, PrototypeBank, Residuals, ViewBatch, ViewFilter};
use crate::error::{Error, Result};
use crate::numerics::l2_normalize;
use crate::zeroshot::DEFAULT_TEMPERATURE;
use crate::Strategy;

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstanceSpec {
    pub classes: usize,
    pub dim: usize,
    pub views: usize,
    pub temperature: f64,
    /// Standard deviation of the residuals the gradient is taken at.
    pub residual_scale: f64,
    /// Chance that a class gets a visual prototype. At least one always does.
    pub visual_fraction: f64,
    pub rho: f64,
    pub strategy: Strategy,
    pub params: AdapterParams,
    pub step: f64,
    pub tolerance: f64,
    /// Adds `(coordinate, offset)` to the analytic gradient before comparing.
    pub corrupt: Option<(usize, f64)>,
}

impl Default for InstanceSpec {
    fn default() -> Self {
        Self {
            classes: 3,
            dim: 5,
            views: 4,
            temperature: DEFAULT_TEMPERATURE,
            residual_scale: 0.05,
            visual_fraction: 0.7,
            rho: 0.5,
            strategy: Strategy::Entropy,
            params: AdapterParams::default(),
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            corrupt: None,
        }
    }
}

/// Where a flat residual coordinate lives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Coordinate {
    pub index: usize,
    pub visual: bool,
    pub class: usize,
    pub component: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub classes: usize,
    pub dim: usize,
    pub views: usize,
    pub seed: u64,
    pub objective: f64,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst: Coordinate,
    pub analytic: f64,
    pub numeric: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// `|a − n| / max(|a|, |n|, 1)`: relative for large entries, absolute for
/// entries below one.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if let Ok(u) = l2_normalize(&g) {
            return u;
        }
    }
}

struct Instance {
    batch: ViewBatch,
    selected: Vec<usize>,
    bank: PrototypeBank,
    residuals: Residuals,
}

fn build_instance(spec: &InstanceSpec, seed: u64) -> Result<Instance> {
    if spec.classes < 2 || spec.dim < 2 || spec.views == 0 {
        return Err(Error::InvalidParams(format!(
            "instance needs C ≥ 2, d ≥ 2, V ≥ 1 (got {}, {}, {})",
            spec.classes, spec.dim, spec.views
        )));
    }
    if !(spec.step > 0.0) {
        return Err(Error::InvalidParams(format!("step {} must be > 0", spec.step)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, d) = (spec.classes, spec.dim);
    let text: Vec<Vec<f64>> = (0..c).map(|_| unit(&mut rng, d)).collect();
    let mut visual: Vec<Option<Vec<f64>>> = (0..c)
        .map(|_| {
            let v = unit(&mut rng, d);
            rng.random_bool(spec.visual_fraction.clamp(0.0, 1.0)).then_some(v)
        })
        .collect();
    if visual.iter().all(Option::is_none) {
        let k = rng.random_range(0..c);
        visual[k] = Some(unit(&mut rng, d));
    }
    let bank = PrototypeBank::new(text, visual, spec.temperature)?;
    let views: Vec<Vec<f64>> = (0..spec.views).map(|_| unit(&mut rng, d)).collect();
    let flat: Vec<f64> = (0..2 * c * d)
        .map(|_| spec.residual_scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let residuals = Residuals::from_flat(c, d, flat)?;

    let batch = ViewBatch::score(views, &bank.with_residuals(&residuals)?, &spec.params)?;
    let (selected, _) = filter_views(&batch, spec.strategy, ViewFilter::TopFraction(spec.rho))?;
    Ok(Instance {
        batch,
        selected,
        bank,
        residuals,
    })
}

/// Builds a random instance from `seed` and compares every residual
/// coordinate of the analytic gradient with a central difference.
pub fn finite_difference_check(spec: &InstanceSpec, seed: u64) -> Result<GradCheckReport> {
    let inst = build_instance(spec, seed)?;
    let eval = compute_gradients(&inst.batch, &inst.selected, &inst.bank, &inst.residuals, &spec.params)?;
    let mut analytic = eval.gradient.as_slice().to_vec();
    if let Some((k, offset)) = spec.corrupt {
        let n = analytic.len();
        let slot = analytic
            .get_mut(k)
            .ok_or_else(|| Error::InvalidParams(format!("corrupt coordinate {k} outside {n}")))?;
        *slot += offset;
    }

    let f = |r: &Residuals| total_objective(&inst.batch, &inst.selected, &inst.bank, r, &spec.params);
    let cd = spec.classes * spec.dim;
    let mut probe = inst.residuals.clone();
    let mut worst = (0usize, 0.0f64, 0.0f64, 0.0f64);
    let mut max_abs = 0.0f64;
    for k in 0..analytic.len() {
        let x0 = probe.as_slice()[k];
        probe.as_mut_slice()[k] = x0 + spec.step;
        let up = f(&probe)?;
        probe.as_mut_slice()[k] = x0 - spec.step;
        let down = f(&probe)?;
        probe.as_mut_slice()[k] = x0;
        let numeric = (up - down) / (2.0 * spec.step);
        let rel = relative_error(analytic[k], numeric);
        max_abs = max_abs.max((analytic[k] - numeric).abs());
        if rel > worst.1 || k == 0 {
            worst = (k, rel, analytic[k], numeric);
        }
    }
    let (k, rel, a, n) = worst;
    let visual = k >= cd;
    let local = k % cd;
    Ok(GradCheckReport {
        classes: spec.classes,
        dim: spec.dim,
        views: spec.views,
        seed,
        objective: eval.objective,
        coordinates: analytic.len(),
        max_rel_error: rel,
        max_abs_error: max_abs,
        worst: Coordinate {
            index: k,
            visual,
            class: local / spec.dim,
            component: local % spec.dim,
        },
        analytic: a,
        numeric: n,
        tolerance: spec.tolerance,
        passed: rel <= spec.tolerance,
    })
}
