//! `H(P_ACE) + λ·L_align` and its exact gradient with respect to the
//! residuals, differentiating through renormalization, the modulation
//! function, both softmaxes and the entropy. The selected view set is held
//! fixed.

use super::{AdapterParams, PrototypeBank, Residuals, ViewBatch};
use crate::error::{Error, Result};
use crate::numerics::{dot, modulation, LOG_FLOOR, ZERO_NORM};

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub objective: f64,
    pub aug: f64,
    /// Zero when no class has a visual prototype.
    pub align: f64,
    pub gradient: Residuals,
}

pub(crate) struct AlignTerms {
    pub loss: f64,
    /// `∂L_align/∂A` where `A_ij = t_i·v_j` over the included classes.
    pub d_sim: Vec<Vec<f64>>,
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Loss and similarity-gradient of the alignment term over `k` paired
/// prototypes.
pub(crate) fn align_terms(text: &[&[f64]], visual: &[&[f64]]) -> AlignTerms {
    let k = text.len();
    let sim: Vec<Vec<f64>> = text
        .iter()
        .map(|t| visual.iter().map(|v| dot(t, v)).collect())
        .collect();
    let row_lse: Vec<f64> = (0..k).map(|i| log_sum_exp(sim[i].iter().copied())).collect();
    let col_lse: Vec<f64> = (0..k)
        .map(|j| log_sum_exp((0..k).map(|i| sim[i][j])))
        .collect();
    let inv_k = 1.0 / k as f64;
    let loss = (0..k)
        .map(|i| -2.0 * sim[i][i] + row_lse[i] + col_lse[i])
        .sum::<f64>()
        * inv_k;
    let d_sim = (0..k)
        .map(|i| {
            (0..k)
                .map(|j| {
                    let row = (sim[i][j] - row_lse[i]).exp();
                    let col = (sim[i][j] - col_lse[j]).exp();
                    let diag = if i == j { 2.0 } else { 0.0 };
                    (row + col - diag) * inv_k
                })
                .collect()
        })
        .collect();
    AlignTerms { loss, d_sim }
}

struct Normalized {
    unit: Vec<f64>,
    norm: f64,
}

fn normalize_sum(base: &[f64], delta: &[f64], class: usize) -> Result<Normalized> {
    let sum: Vec<f64> = base.iter().zip(delta).map(|(a, b)| a + b).collect();
    let norm = dot(&sum, &sum).sqrt();
    if norm < ZERO_NORM || !norm.is_finite() {
        return Err(Error::DegenerateSum(class));
    }
    Ok(Normalized {
        unit: sum.iter().map(|x| x / norm).collect(),
        norm,
    })
}

/// Pulls a gradient on `u/‖u‖` back to `u`.
fn project_back(grad: &[f64], n: &Normalized, out: &mut [f64]) {
    let radial = dot(grad, &n.unit);
    for ((o, g), u) in out.iter_mut().zip(grad).zip(&n.unit) {
        *o = (g - radial * u) / n.norm;
    }
}

fn check_selection(batch: &ViewBatch, selected: &[usize], dim: usize) -> Result<()> {
    if selected.is_empty() {
        return Err(Error::EmptyBatch);
    }
    for &i in selected {
        let z = batch.views.get(i).ok_or_else(|| {
            Error::ShapeMismatch(format!("selected view {i} outside batch of {}", batch.len()))
        })?;
        if z.len() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                got: z.len(),
            });
        }
    }
    Ok(())
}

fn evaluate(
    batch: &ViewBatch,
    selected: &[usize],
    bank: &PrototypeBank,
    residuals: &Residuals,
    params: &AdapterParams,
    with_gradient: bool,
) -> Result<Evaluation> {
    let (classes, dim) = (bank.classes(), bank.dim());
    residuals.check_shape(classes, dim)?;
    check_selection(batch, selected, dim)?;
    let tau = bank.temperature();
    let AdapterParams { alpha, beta, lambda } = *params;

    let text = (0..classes)
        .map(|c| normalize_sum(bank.text(c), residuals.text(c), c))
        .collect::<Result<Vec<_>>>()?;
    let visual = (0..classes)
        .map(|c| {
            bank.visual(c)
                .map(|v| normalize_sum(v, residuals.visual(c), c))
                .transpose()
        })
        .collect::<Result<Vec<_>>>()?;

    // forward over the frozen view set
    let n_sel = selected.len() as f64;
    let mut view_probs = Vec::with_capacity(selected.len());
    let mut view_mods = Vec::with_capacity(selected.len());
    let mut p_ace = vec![0.0; classes];
    for &i in selected {
        let z = &batch.views[i];
        let mut logits = vec![0.0; classes];
        let mut mods = vec![0.0; classes];
        for c in 0..classes {
            logits[c] = dot(z, &text[c].unit) / tau;
            if let Some(v) = &visual[c] {
                mods[c] = modulation(dot(z, &v.unit), alpha, beta);
                logits[c] += mods[c];
            }
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut p: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= s);
        for (acc, x) in p_ace.iter_mut().zip(&p) {
            *acc += x / n_sel;
        }
        view_probs.push(p);
        view_mods.push(mods);
    }
    let log_p: Vec<f64> = p_ace.iter().map(|&x| x.max(LOG_FLOOR).ln()).collect();
    let aug: f64 = p_ace
        .iter()
        .zip(&log_p)
        .map(|(&x, &l)| if x <= 0.0 { 0.0 } else { -x * l })
        .sum();

    let present: Vec<usize> = (0..classes).filter(|&c| visual[c].is_some()).collect();
    let align = if present.is_empty() {
        None
    } else {
        let t: Vec<&[f64]> = present.iter().map(|&c| text[c].unit.as_slice()).collect();
        let v: Vec<&[f64]> = present
            .iter()
            .map(|&c| visual[c].as_ref().unwrap().unit.as_slice())
            .collect();
        Some(align_terms(&t, &v))
    };
    let align_loss = align.as_ref().map_or(0.0, |a| a.loss);
    let objective = aug + lambda * align_loss;

    let mut gradient = Residuals::zeros(classes, dim);
    if !with_gradient {
        return Ok(Evaluation {
            objective,
            aug,
            align: align_loss,
            gradient,
        });
    }

    // gradients with respect to the normalized prototypes
    let mut g_text = vec![vec![0.0; dim]; classes];
    let mut g_visual = vec![vec![0.0; dim]; classes];
    // ∂H/∂P_c = −(log P_c + 1); the constant cancels in the softmax backward
    let g_p: Vec<f64> = log_p.iter().map(|l| -l / n_sel).collect();
    for ((&i, p), mods) in selected.iter().zip(&view_probs).zip(&view_mods) {
        let z = &batch.views[i];
        let mean_g: f64 = p.iter().zip(&g_p).map(|(a, b)| a * b).sum();
        for c in 0..classes {
            let d_logit = p[c] * (g_p[c] - mean_g);
            if d_logit == 0.0 {
                continue;
            }
            let kt = d_logit / tau;
            for (g, x) in g_text[c].iter_mut().zip(z) {
                *g += kt * x;
            }
            if visual[c].is_some() {
                // F'(s) = β·F(s)
                let kv = d_logit * beta * mods[c];
                for (g, x) in g_visual[c].iter_mut().zip(z) {
                    *g += kv * x;
                }
            }
        }
    }
    if let Some(a) = &align {
        for (ii, &ci) in present.iter().enumerate() {
            for (jj, &cj) in present.iter().enumerate() {
                let w = lambda * a.d_sim[ii][jj];
                let vj = &visual[cj].as_ref().unwrap().unit;
                let ti = &text[ci].unit;
                for k in 0..dim {
                    g_text[ci][k] += w * vj[k];
                    g_visual[cj][k] += w * ti[k];
                }
            }
        }
    }

    for c in 0..classes {
        project_back(&g_text[c], &text[c], gradient.text_mut(c));
        if let Some(v) = &visual[c] {
            project_back(&g_visual[c], v, gradient.visual_mut(c));
        }
    }
    if gradient.as_slice().iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    Ok(Evaluation {
        objective,
        aug,
        align: align_loss,
        gradient,
    })
}

/// Objective at the prototypes with `residuals` applied, over the views in
/// `selected`.
pub fn total_objective(
    batch: &ViewBatch,
    selected: &[usize],
    bank: &PrototypeBank,
    residuals: &Residuals,
    params: &AdapterParams,
) -> Result<f64> {
    evaluate(batch, selected, bank, residuals, params, false).map(|e| e.objective)
}

/// Objective value and its gradient with respect to `t̂` and `v̂`. Rows of
/// `v̂` for classes without a visual prototype get zero gradient.
pub fn compute_gradients(
    batch: &ViewBatch,
    selected: &[usize],
    bank: &PrototypeBank,
    residuals: &Residuals,
    params: &AdapterParams,
) -> Result<Evaluation> {
    evaluate(batch, selected, bank, residuals, params, true)
}
