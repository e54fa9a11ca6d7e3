//! Training objectives over (target, prediction) quantile-vector pairs.
//!
//! Four losses: level-wise l1/l2 gaps (discrete 1-D Wasserstein matching),
//! pinball against empirical quantile targets, and pinball of every level
//! against the sample median. Each returns value and analytic gradient with
//! respect to the prediction.

use serde::{Deserialize, Serialize};

use crate::distributions::{QuantileGrid, QuantileVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    L1Wasserstein,
    L2Wasserstein,
    PinballQ,
    PinballMed,
}

impl LossKind {
    pub const ALL: [LossKind; 4] =
        [LossKind::L1Wasserstein, LossKind::L2Wasserstein, LossKind::PinballQ, LossKind::PinballMed];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::L1Wasserstein => "l1w",
            LossKind::L2Wasserstein => "l2w",
            LossKind::PinballQ => "pinball_q",
            LossKind::PinballMed => "pinball_med",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "l1w" => Ok(LossKind::L1Wasserstein),
            "l2w" => Ok(LossKind::L2Wasserstein),
            "pinball_q" => Ok(LossKind::PinballQ),
            "pinball_med" => Ok(LossKind::PinballMed),
            other => Err(Error::Config(format!(
                "unknown loss {other:?} (expected l1w|l2w|pinball_q|pinball_med)"
            ))),
        }
    }
}

/// Loss value with per-level terms and the gradient w.r.t. the prediction.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub total: f64,
    pub per_level: Vec<f64>,
    pub gradient: Vec<f64>,
}

/// Supervision for one instance: the target quantile vector plus the sample
/// median (the scalar pseudo-target used by the median-pinball loss).
#[derive(Debug, Clone)]
pub struct LossTarget<'a> {
    pub quantiles: &'a QuantileVector,
    pub median: f64,
}

/// Check loss `ρ_τ(u) = u·(τ − 1[u<0])`.
pub fn pinball(u: f64, tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidTau(tau));
    }
    Ok(if u < 0.0 { u * (tau - 1.0) } else { u * tau })
}

/// Derivative of `ρ_τ(t - p)` with respect to `p`; 0 at the kink.
fn pinball_grad_wrt_pred(u: f64, tau: f64) -> f64 {
    if u > 0.0 {
        -tau
    } else if u < 0.0 {
        1.0 - tau
    } else {
        0.0
    }
}

fn check_pair(target: &QuantileVector, pred: &QuantileVector) -> Result<()> {
    if target.grid != pred.grid {
        return Err(Error::GridMismatch);
    }
    if target.space != pred.space {
        return Err(Error::SpaceMismatch { expected: target.space.name(), got: pred.space.name() });
    }
    Ok(())
}

fn check_weights(weights: Option<&[f64]>, q: usize) -> Result<()> {
    if let Some(w) = weights {
        if w.len() != q {
            return Err(Error::LengthMismatch { left: w.len(), right: q });
        }
        if let Some(i) = w.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidWeight(i));
        }
    }
    Ok(())
}

fn assemble(per_level: Vec<f64>, mut gradient: Vec<f64>, weights: Option<&[f64]>) -> LossReport {
    let q = per_level.len() as f64;
    let total = match weights {
        None => per_level.iter().sum::<f64>() / q,
        Some(w) => per_level.iter().zip(w).map(|(l, w)| l * w).sum::<f64>() / q,
    };
    if let Some(w) = weights {
        for (g, w) in gradient.iter_mut().zip(w) {
            *g *= w;
        }
    }
    LossReport { total, per_level, gradient }
}

/// Mean absolute level-wise gap (discrete 1-Wasserstein).
pub fn loss_l1(target: &QuantileVector, pred: &QuantileVector, weights: Option<&[f64]>) -> Result<LossReport> {
    check_pair(target, pred)?;
    check_weights(weights, pred.len())?;
    let q = pred.len() as f64;
    let mut per_level = Vec::with_capacity(pred.len());
    let mut gradient = Vec::with_capacity(pred.len());
    for (&t, &p) in target.values.iter().zip(&pred.values) {
        let u = t - p;
        per_level.push(u.abs());
        gradient.push(if u > 0.0 { -1.0 / q } else if u < 0.0 { 1.0 / q } else { 0.0 });
    }
    Ok(assemble(per_level, gradient, weights))
}

/// Mean squared level-wise gap (discrete squared 2-Wasserstein).
pub fn loss_l2(target: &QuantileVector, pred: &QuantileVector, weights: Option<&[f64]>) -> Result<LossReport> {
    check_pair(target, pred)?;
    check_weights(weights, pred.len())?;
    let q = pred.len() as f64;
    let mut per_level = Vec::with_capacity(pred.len());
    let mut gradient = Vec::with_capacity(pred.len());
    for (&t, &p) in target.values.iter().zip(&pred.values) {
        let u = t - p;
        per_level.push(u * u);
        gradient.push(-2.0 * u / q);
    }
    Ok(assemble(per_level, gradient, weights))
}

/// Pinball at each level against the empirical quantile target at that level.
pub fn loss_pinball_q(
    target: &QuantileVector,
    pred: &QuantileVector,
    weights: Option<&[f64]>,
) -> Result<LossReport> {
    check_pair(target, pred)?;
    check_weights(weights, pred.len())?;
    let q = pred.len() as f64;
    let mut per_level = Vec::with_capacity(pred.len());
    let mut gradient = Vec::with_capacity(pred.len());
    for ((&t, &p), &tau) in target.values.iter().zip(&pred.values).zip(pred.grid.levels()) {
        let u = t - p;
        per_level.push(pinball(u, tau)?);
        gradient.push(pinball_grad_wrt_pred(u, tau) / q);
    }
    Ok(assemble(per_level, gradient, weights))
}

/// Pinball at each level against the scalar sample median.
pub fn loss_pinball_med(median_target: f64, pred: &QuantileVector, weights: Option<&[f64]>) -> Result<LossReport> {
    check_weights(weights, pred.len())?;
    let q = pred.len() as f64;
    let mut per_level = Vec::with_capacity(pred.len());
    let mut gradient = Vec::with_capacity(pred.len());
    for (&p, &tau) in pred.values.iter().zip(pred.grid.levels()) {
        let u = median_target - p;
        per_level.push(pinball(u, tau)?);
        gradient.push(pinball_grad_wrt_pred(u, tau) / q);
    }
    Ok(assemble(per_level, gradient, weights))
}

/// Dispatch on loss kind.
pub fn evaluate(
    kind: LossKind,
    target: &LossTarget,
    pred: &QuantileVector,
    weights: Option<&[f64]>,
) -> Result<LossReport> {
    match kind {
        LossKind::L1Wasserstein => loss_l1(target.quantiles, pred, weights),
        LossKind::L2Wasserstein => loss_l2(target.quantiles, pred, weights),
        LossKind::PinballQ => loss_pinball_q(target.quantiles, pred, weights),
        LossKind::PinballMed => loss_pinball_med(target.median, pred, weights),
    }
}

/// Un-normalized inverse-asymptotic-variance weights `M·f_k²/(τ_k(1−τ_k))`.
pub fn variance_weights_raw(m: usize, grid: &QuantileGrid, density: &[f64]) -> Result<Vec<f64>> {
    if density.len() != grid.len() {
        return Err(Error::LengthMismatch { left: density.len(), right: grid.len() });
    }
    if let Some(i) = density.iter().position(|&f| !(f > 0.0 && f.is_finite())) {
        return Err(Error::NonPositiveDensity(i));
    }
    Ok(grid
        .levels()
        .iter()
        .zip(density)
        .map(|(&tau, &f)| m as f64 * f * f / (tau * (1.0 - tau)))
        .collect())
}

/// Inverse-variance weights normalized to mean 1 over the grid.
pub fn apply_variance_weights(m: usize, grid: &QuantileGrid, density: &[f64]) -> Result<Vec<f64>> {
    let mut w = variance_weights_raw(m, grid, density)?;
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    for v in &mut w {
        *v /= mean;
    }
    Ok(w)
}

/// Density estimate from the quantile slope, `f = 1/∂_τ Q(τ)`, by central
/// differences over the grid (one-sided at the ends).
pub fn density_from_quantile_slope(q: &QuantileVector) -> Result<Vec<f64>> {
    let n = q.len();
    if n < 2 {
        return Err(Error::Config("density slope needs at least two grid levels".into()));
    }
    let t = q.grid.levels();
    let v = &q.values;
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let (lo, hi) = if k == 0 {
            (0, 1)
        } else if k == n - 1 {
            (n - 2, n - 1)
        } else {
            (k - 1, k + 1)
        };
        let dq = v[hi] - v[lo];
        if dq <= 0.0 {
            return Err(Error::NonPositiveDensity(k));
        }
        out.push((t[hi] - t[lo]) / dq);
    }
    Ok(out)
}
