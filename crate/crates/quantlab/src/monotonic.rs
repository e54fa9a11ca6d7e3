//! Monotonicity strategies for predicted quantile vectors.

use serde::{Deserialize, Serialize};

use crate::distributions::QuantileVector;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MonotoneMode {
    /// No constraint: raw predicted quantiles as-is.
    Baseline,
    /// Non-negative gaps between adjacent quantiles, cumulatively summed,
    /// during both training and inference.
    Cumsum,
    /// Training untouched; sort predictions at inference time.
    Postprocess,
}

impl MonotoneMode {
    pub const ALL: [MonotoneMode; 3] = [MonotoneMode::Baseline, MonotoneMode::Cumsum, MonotoneMode::Postprocess];

    pub fn name(self) -> &'static str {
        match self {
            MonotoneMode::Baseline => "baseline",
            MonotoneMode::Cumsum => "cumsum",
            MonotoneMode::Postprocess => "postprocess",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(MonotoneMode::Baseline),
            "cumsum" => Ok(MonotoneMode::Cumsum),
            "postprocess" => Ok(MonotoneMode::Postprocess),
            other => Err(Error::Config(format!(
                "unknown monotone mode {other:?} (expected baseline|cumsum|postprocess)"
            ))),
        }
    }
}

/// Numerically stable softplus `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sorts predicted quantile values ascending; multiset of values preserved.
pub fn repair_postprocess(pred: &QuantileVector) -> QuantileVector {
    let mut out = pred.clone();
    out.values.sort_by(f64::total_cmp);
    out
}

/// Decodes raw head outputs into a monotone vector:
/// `q_1 = raw_1`, `q_k = q_{k-1} + softplus(raw_k)`.
pub fn cumsum_decode(raw: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(raw.len());
    for (k, &r) in raw.iter().enumerate() {
        if k == 0 {
            out.push(r);
        } else {
            out.push(out[k - 1] + softplus(r));
        }
    }
    out
}

/// Backpropagates a gradient w.r.t. the decoded vector onto the raw outputs.
///
/// `dL/draw_1 = Σ_k dL/dq_k`; `dL/draw_k = σ(raw_k) · Σ_{j>=k} dL/dq_j`.
pub fn cumsum_backward(raw: &[f64], grad_decoded: &[f64]) -> Vec<f64> {
    debug_assert_eq!(raw.len(), grad_decoded.len());
    let n = raw.len();
    let mut out = vec![0.0; n];
    let mut suffix = 0.0;
    for k in (0..n).rev() {
        suffix += grad_decoded[k];
        out[k] = if k == 0 { suffix } else { sigmoid(raw[k]) * suffix };
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{QuantileGrid, QuantileVector, Space};
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn qv(values: Vec<f64>) -> QuantileVector {
        let g = QuantileGrid::uniform(values.len());
        QuantileVector::new(g, values, Space::Log).unwrap()
    }

    #[test]
    fn postprocess_sorts_and_preserves() {
        let p = qv(vec![3.0, 1.0, 2.0]);
        let r = repair_postprocess(&p);
        assert_eq!(r.values, vec![1.0, 2.0, 3.0]);
        // idempotent
        assert_eq!(repair_postprocess(&r).values, r.values);
        // ties preserved
        let t = qv(vec![2.0, 2.0, 1.0]);
        assert_eq!(repair_postprocess(&t).values, vec![1.0, 2.0, 2.0]);
        // already sorted input unchanged
        let s = qv(vec![-1.0, 0.0, 5.0]);
        assert_eq!(repair_postprocess(&s).values, s.values);
    }

    #[test]
    fn cumsum_known_values() {
        let d = cumsum_decode(&[1.0, 0.0, 0.0]);
        let ln2 = std::f64::consts::LN_2;
        assert!((d[0] - 1.0).abs() < 1e-15);
        assert!((d[1] - (1.0 + ln2)).abs() < 1e-12);
        assert!((d[2] - (1.0 + 2.0 * ln2)).abs() < 1e-12);

        let flat = cumsum_decode(&[0.0, -500.0, -500.0]);
        assert!((flat[2] - flat[0]).abs() < 1e-12);
    }

    #[test]
    fn cumsum_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let raw: Vec<f64> = (0..9).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let gout: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let analytic = cumsum_backward(&raw, &gout);
            let step = 1e-6;
            for k in 0..9 {
                let mut hi = raw.clone();
                hi[k] += step;
                let mut lo = raw.clone();
                lo[k] -= step;
                let f = |r: &[f64]| -> f64 {
                    cumsum_decode(r).iter().zip(&gout).map(|(q, g)| q * g).sum()
                };
                let fd = (f(&hi) - f(&lo)) / (2.0 * step);
                let rel = (analytic[k] - fd).abs() / analytic[k].abs().max(fd.abs()).max(1e-9);
                assert!(rel < 1e-5, "coord {k}: {} vs {}", analytic[k], fd);
            }
        }
    }

    proptest! {
        #[test]
        fn cumsum_always_monotone(raw in prop::collection::vec(-50f64..50.0, 1..32)) {
            let d = cumsum_decode(&raw);
            prop_assert!(d.windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn postprocess_value_preserving(values in prop::collection::vec(-100f64..100.0, 1..32)) {
            let p = qv(values.clone());
            let r = repair_postprocess(&p);
            let mut expect = values;
            expect.sort_by(f64::total_cmp);
            prop_assert_eq!(r.values, expect);
        }
    }

    #[test]
    fn postprocess_never_increases_l1_to_monotone_target() {
        use crate::losses::loss_l1;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let mut tv: Vec<f64> = (0..9).map(|_| rng.gen_range(-5.0..5.0)).collect();
            tv.sort_by(f64::total_cmp);
            let target = qv(tv);
            let pred = qv((0..9).map(|_| rng.gen_range(-5.0..5.0)).collect());
            let before = loss_l1(&target, &pred, None).unwrap().total;
            let after = loss_l1(&target, &repair_postprocess(&pred), None).unwrap().total;
            assert!(after <= before + 1e-12, "after {after} before {before}");
        }
    }
}
