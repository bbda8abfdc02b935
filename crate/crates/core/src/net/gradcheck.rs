//! Central finite-difference gradient checking.
//!
//! The loss here is recomputed from [`forward`] logits with its own
//! log-sum-exp, so it shares no code with the backward pass it checks.

use super::{forward, project, Example, Grads, Params};

/// Batch loss evaluated purely through the forward pass, in `f64`.
pub fn reference_loss(params: &Params<f64>, batch: &[Example<'_>]) -> f64 {
    let mut total = 0.0;
    for ex in batch {
        let cv = ex.features.map(|f| project(params, f).expect("valid features"));
        let out = forward(params, cv.as_deref(), &ex.text, ex.mode).expect("valid example");
        let mut sum = 0.0;
        for &(pos, target) in &ex.supervised {
            let row = out.row(pos);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            sum += lse - row[target as usize];
        }
        total += sum * ex.weight;
    }
    total / batch.len() as f64
}

#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub mismatches: Vec<GradMismatch>,
}

/// Compares every tracked gradient coordinate against
/// `(L(p + h) - L(p - h)) / 2h`. A coordinate passes when
/// `|a - n| <= rel_tol * max(|a|, |n|) + abs_tol`; the absolute term absorbs
/// the O(h^2) truncation error on near-zero gradients.
pub fn check_gradients(
    params: &Params<f64>,
    batch: &[Example<'_>],
    grads: &Grads<f64>,
    step: f64,
    rel_tol: f64,
    abs_tol: f64,
) -> GradCheckReport {
    let mut report = GradCheckReport::default();
    let mut probe = params.clone();
    for (ti, t) in params.tensors.iter().enumerate() {
        let Some(g) = grads.get(ti) else { continue };
        for i in 0..t.data.len() {
            let orig = t.data[i];
            probe.tensors[ti].data[i] = orig + step;
            let up = reference_loss(&probe, batch);
            probe.tensors[ti].data[i] = orig - step;
            let down = reference_loss(&probe, batch);
            probe.tensors[ti].data[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = g[i];
            let scale = analytic.abs().max(numeric.abs());
            let diff = (analytic - numeric).abs();
            report.checked += 1;
            if scale > 0.0 {
                report.max_rel_error = report.max_rel_error.max(diff / (scale + abs_tol));
            }
            if diff > rel_tol * scale + abs_tol {
                report.mismatches.push(GradMismatch { tensor: t.name.clone(), index: i, analytic, numeric });
            }
        }
    }
    report
}
