//! Evaluation metrics over predicted vs ground-truth quantile vectors.
//!
//! All metrics operate in original (exponentiated) units. Zero-denominator
//! instances are excluded and tallied rather than clamped. Reductions are
//! sequential in input order so reports are bit-reproducible.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::distributions::{QuantileVector, Space};
use crate::error::{Error, Result};

/// One evaluation instance: prediction, ground-truth quantiles, raw outcomes.
#[derive(Debug, Clone)]
pub struct EvalCase {
    pub id: String,
    pub pred: QuantileVector,
    pub target: QuantileVector,
    pub outcomes: Vec<f64>,
}

/// The coarse MAPE level set 𝒯 = {0.1, 0.2, ..., 0.9}.
pub const COARSE_LEVELS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    /// (tau, percent) at each coarse level present on the grid.
    pub mape_at: Vec<(f64, f64)>,
    pub avg_mape: f64,
    pub wmape: f64,
    pub smape: f64,
    pub crps: f64,
    pub crpss: f64,
    /// (nominal coverage, percent width) for c in {90, 95, 99}.
    pub rciw: Vec<(u32, f64)>,
    pub n: usize,
    /// Instances dropped from at least one metric for a zero denominator.
    pub excluded: usize,
}

impl MetricReport {
    fn rciw_at(&self, c: u32) -> f64 {
        self.rciw.iter().find(|(k, _)| *k == c).map(|(_, v)| *v).unwrap_or(f64::NAN)
    }

    /// Flat key-value text block with the exact external field names.
    pub fn to_flat_block(&self) -> String {
        format!(
            "avg_mape {}\nwmape {}\nsmape {}\ncrpss {}\nrciw90 {}\nrciw95 {}\nrciw99 {}\nn {}\nexcluded {}\n",
            self.avg_mape,
            self.wmape,
            self.smape,
            self.crpss,
            self.rciw_at(90),
            self.rciw_at(95),
            self.rciw_at(99),
            self.n,
            self.excluded
        )
    }

    pub fn csv_header() -> &'static str {
        "avg_mape,wmape,smape,crpss,rciw90,rciw95,rciw99,n,excluded"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.avg_mape,
            self.wmape,
            self.smape,
            self.crpss,
            self.rciw_at(90),
            self.rciw_at(95),
            self.rciw_at(99),
            self.n,
            self.excluded
        )
    }
}

fn require_original(v: &QuantileVector) -> Result<()> {
    if v.space != Space::Original {
        return Err(Error::SpaceMismatch { expected: "original", got: "log" });
    }
    Ok(())
}

/// MAPE at a single level (percent). Returns the metric plus the number of
/// instances excluded for a zero target quantile at that level.
pub fn mape_at(preds: &[QuantileVector], targets: &[QuantileVector], tau: f64) -> Result<(f64, usize)> {
    if preds.len() != targets.len() {
        return Err(Error::LengthMismatch { left: preds.len(), right: targets.len() });
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut excluded = 0usize;
    for (p, t) in preds.iter().zip(targets) {
        require_original(p)?;
        require_original(t)?;
        let (pi, ti) = match (p.at_level(tau), t.at_level(tau)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::Config(format!("level {tau} not on the quantile grid"))),
        };
        if ti == 0.0 {
            excluded += 1;
            continue;
        }
        sum += ((pi - ti) / ti).abs();
        n += 1;
    }
    if n == 0 {
        return Err(Error::ZeroDenominator("mape_at: no instances with nonzero target"));
    }
    Ok((100.0 * sum / n as f64, excluded))
}

/// Unweighted mean of MAPE@tau over the coarse levels present on the grid.
pub fn avg_mape(preds: &[QuantileVector], targets: &[QuantileVector]) -> Result<(f64, usize)> {
    let grid = &targets.first().ok_or(Error::ZeroDenominator("avg_mape: empty input"))?.grid;
    let mut acc = 0.0;
    let mut count = 0usize;
    let mut excluded = 0usize;
    for &tau in COARSE_LEVELS.iter() {
        if grid.position(tau).is_none() {
            continue;
        }
        let (m, ex) = mape_at(preds, targets, tau)?;
        acc += m;
        count += 1;
        excluded = excluded.max(ex);
    }
    if count == 0 {
        return Err(Error::Config("avg_mape: no coarse level present on the grid".into()));
    }
    Ok((acc / count as f64, excluded))
}

/// Per-instance mean absolute percentage error across the coarse levels,
/// used for paired significance testing.
pub fn per_instance_avg_mape(pred: &QuantileVector, target: &QuantileVector) -> Result<f64> {
    require_original(pred)?;
    require_original(target)?;
    let mut acc = 0.0;
    let mut count = 0usize;
    for &tau in COARSE_LEVELS.iter() {
        if let (Some(p), Some(t)) = (pred.at_level(tau), target.at_level(tau)) {
            if t == 0.0 {
                return Err(Error::ZeroDenominator("per-instance mape: zero target quantile"));
            }
            acc += ((p - t) / t).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Config("per-instance mape: no coarse level on grid".into()));
    }
    Ok(100.0 * acc / count as f64)
}

fn medians(preds: &[QuantileVector], targets: &[QuantileVector]) -> Result<Vec<(f64, f64)>> {
    preds
        .iter()
        .zip(targets)
        .map(|(p, t)| {
            require_original(p)?;
            require_original(t)?;
            match (p.at_level(0.5), t.at_level(0.5)) {
                (Some(a), Some(b)) => Ok((a, b)),
                _ => Err(Error::Config("median level 0.5 not on the quantile grid".into())),
            }
        })
        .collect()
}

/// Weighted MAPE of median predictions: `100·Σ|ŷ−y| / Σ|y|`.
pub fn wmape(preds: &[QuantileVector], targets: &[QuantileVector]) -> Result<f64> {
    let ms = medians(preds, targets)?;
    let num: f64 = ms.iter().map(|(p, t)| (p - t).abs()).sum();
    let den: f64 = ms.iter().map(|(_, t)| t.abs()).sum();
    if den == 0.0 {
        return Err(Error::ZeroDenominator("wmape: sum of |target medians| is zero"));
    }
    Ok(100.0 * num / den)
}

/// Symmetric MAPE of median predictions: `(200/n)·Σ |ŷ−y|/(|ŷ|+|y|)`.
pub fn smape(preds: &[QuantileVector], targets: &[QuantileVector]) -> Result<(f64, usize)> {
    let ms = medians(preds, targets)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut excluded = 0usize;
    for (p, t) in ms {
        let den = p.abs() + t.abs();
        if den == 0.0 {
            excluded += 1;
            continue;
        }
        sum += (p - t).abs() / den;
        n += 1;
    }
    if n == 0 {
        return Err(Error::ZeroDenominator("smape: all instances excluded"));
    }
    Ok((200.0 * sum / n as f64, excluded))
}

/// Grid CRPS of a quantile forecast against one outcome:
/// `(2/Q)·Σ_k ρ_{τ_k}(y − pred_k)`.
pub fn crps(pred: &QuantileVector, outcome: f64) -> f64 {
    let q = pred.len() as f64;
    let mut acc = 0.0;
    for (&p, &tau) in pred.values.iter().zip(pred.grid.levels()) {
        let u = outcome - p;
        acc += if u < 0.0 { u * (tau - 1.0) } else { u * tau };
    }
    2.0 * acc / q
}

/// Instance CRPS: mean of per-outcome CRPS over the instance's raw outcomes.
pub fn instance_crps(pred: &QuantileVector, outcomes: &[f64]) -> f64 {
    let sum: f64 = outcomes.iter().map(|&y| crps(pred, y)).sum();
    sum / outcomes.len() as f64
}

/// Skill score `1 − CRPS_model / CRPS_ref` against a fixed climatological
/// reference forecast (interpolated pooled training outcomes).
pub fn crpss(cases: &[EvalCase], reference: &QuantileVector) -> Result<(f64, f64)> {
    if cases.is_empty() {
        return Err(Error::ZeroDenominator("crpss: empty input"));
    }
    let mut model = 0.0;
    let mut refc = 0.0;
    for c in cases {
        model += instance_crps(&c.pred, &c.outcomes);
        refc += instance_crps(reference, &c.outcomes);
    }
    model /= cases.len() as f64;
    refc /= cases.len() as f64;
    if refc == 0.0 {
        return Err(Error::ZeroDenominator("crpss: reference CRPS is zero"));
    }
    Ok((1.0 - model / refc, model))
}

/// Picks the symmetric level pair giving the closest available central
/// coverage: each tail aims at `(1 − c/100)/2`, ties broken toward the wider
/// interval. For the dense 99-level grid this yields (0.05,0.95),
/// (0.02,0.98), (0.01,0.99) for c = 90, 95, 99.
pub fn rciw_pair(grid: &crate::distributions::QuantileGrid, c: u32) -> (usize, usize) {
    let levels = grid.levels();
    let tail = (1.0 - c as f64 / 100.0) / 2.0;
    let pick = |target: f64, prefer_smaller: bool| -> usize {
        let mut best = 0usize;
        let mut best_key = (i64::MAX, 0i64);
        for (i, &t) in levels.iter().enumerate() {
            let err = ((t - target).abs() * 1e9).round() as i64;
            // tie-break toward the wider interval
            let side = if prefer_smaller { (t * 1e9).round() as i64 } else { -(t * 1e9).round() as i64 };
            if (err, side) < best_key {
                best_key = (err, side);
                best = i;
            }
        }
        best
    };
    let lo = pick(tail, true);
    let hi = pick(1.0 - tail, false);
    if lo < hi {
        (lo, hi)
    } else {
        (0, levels.len() - 1)
    }
}

/// Relative coverage interval width at nominal coverage `c` (percent).
pub fn rciw(preds: &[QuantileVector], targets: &[QuantileVector], c: u32) -> Result<(f64, usize)> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(Error::LengthMismatch { left: preds.len(), right: targets.len() });
    }
    let (lo, hi) = rciw_pair(&preds[0].grid, c);
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut excluded = 0usize;
    for (p, t) in preds.iter().zip(targets) {
        require_original(p)?;
        let tm = t
            .at_level(0.5)
            .ok_or_else(|| Error::Config("median level 0.5 not on the target grid".into()))?;
        if tm == 0.0 {
            excluded += 1;
            continue;
        }
        sum += (p.values[hi] - p.values[lo]) / tm.abs();
        n += 1;
    }
    if n == 0 {
        return Err(Error::ZeroDenominator("rciw: all instances excluded"));
    }
    Ok((100.0 * sum / n as f64, excluded))
}

/// Full evaluation report over a case set and a reference forecast.
pub fn evaluate_all(cases: &[EvalCase], reference: &QuantileVector) -> Result<MetricReport> {
    if cases.is_empty() {
        return Err(Error::ZeroDenominator("evaluate_all: empty case set"));
    }
    let preds: Vec<QuantileVector> = cases.iter().map(|c| c.pred.clone()).collect();
    let targets: Vec<QuantileVector> = cases.iter().map(|c| c.target.clone()).collect();

    let grid = &targets[0].grid;
    let mut mape_pairs = Vec::new();
    let mut excluded = 0usize;
    for &tau in COARSE_LEVELS.iter() {
        if grid.position(tau).is_none() {
            continue;
        }
        let (m, ex) = mape_at(&preds, &targets, tau)?;
        mape_pairs.push((tau, m));
        excluded = excluded.max(ex);
    }
    let (avg, ex_avg) = avg_mape(&preds, &targets)?;
    excluded = excluded.max(ex_avg);
    let w = wmape(&preds, &targets)?;
    let (s, ex_s) = smape(&preds, &targets)?;
    excluded = excluded.max(ex_s);
    let (skill, model_crps) = crpss(cases, reference)?;
    let mut rciw_pairs = Vec::new();
    for c in [90u32, 95, 99] {
        let (v, ex_r) = rciw(&preds, &targets, c)?;
        excluded = excluded.max(ex_r);
        rciw_pairs.push((c, v));
    }
    Ok(MetricReport {
        mape_at: mape_pairs,
        avg_mape: avg,
        wmape: w,
        smape: s,
        crps: model_crps,
        crpss: skill,
        rciw: rciw_pairs,
        n: cases.len(),
        excluded,
    })
}

/// Paired two-sided t-test result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignificanceReport {
    pub delta: f64,
    pub ci95: (f64, f64),
    pub t_stat: f64,
    pub p_value: f64,
    pub n: usize,
}

/// Paired two-sided t-test on per-instance scores; delta = mean(b − a).
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<SignificanceReport> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { left: a.len(), right: b.len() });
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::TooFewPairs(n));
    }
    let diffs: Vec<f64> = b.iter().zip(a).map(|(bi, ai)| bi - ai).collect();
    let delta = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - delta) * (d - delta)).sum::<f64>() / (n as f64 - 1.0);
    if var == 0.0 {
        return Err(Error::ZeroVariance);
    }
    let se = (var / n as f64).sqrt();
    let t_stat = delta / se;
    let dof = (n - 1) as f64;
    let dist = StudentsT::new(0.0, 1.0, dof).expect("valid dof");
    let p_value = 2.0 * (1.0 - dist.cdf(t_stat.abs()));
    let tcrit = dist.inverse_cdf(0.975);
    Ok(SignificanceReport {
        delta,
        ci95: (delta - tcrit * se, delta + tcrit * se),
        t_stat,
        p_value,
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::QuantileGrid;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::Distribution;

    fn orig(grid: &QuantileGrid, values: Vec<f64>) -> QuantileVector {
        QuantileVector::new(grid.clone(), values, Space::Original).unwrap()
    }

    #[test]
    fn mape_definition() {
        let g = QuantileGrid::uniform(9);
        let t = orig(&g, vec![100.0; 9]);
        let p = orig(&g, vec![110.0; 9]);
        let (m, ex) = mape_at(&[p.clone()], &[t.clone()], 0.3).unwrap();
        assert!((m - 10.0).abs() < 1e-12);
        assert_eq!(ex, 0);
        let (a, _) = avg_mape(&[p.clone()], &[t.clone()]).unwrap();
        assert!((a - 10.0).abs() < 1e-12);
        let (z, _) = avg_mape(&[t.clone()], &[t.clone()]).unwrap();
        assert_eq!(z, 0.0);
    }

    #[test]
    fn mape_matches_independent_reimplementation() {
        // second straightforward implementation as the oracle
        let g = QuantileGrid::uniform(9);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 40;
        let preds: Vec<QuantileVector> =
            (0..n).map(|_| orig(&g, (0..9).map(|_| rng.gen_range(50.0..150.0)).collect())).collect();
        let targets: Vec<QuantileVector> =
            (0..n).map(|_| orig(&g, (0..9).map(|_| rng.gen_range(50.0..150.0)).collect())).collect();
        let tau = 0.4;
        let (m, _) = mape_at(&preds, &targets, tau).unwrap();
        let k = g.position(tau).unwrap();
        let mut acc = 0.0;
        for i in 0..n {
            acc += 100.0 * (preds[i].values[k] - targets[i].values[k]).abs() / targets[i].values[k];
        }
        let oracle = acc / n as f64;
        assert!((m - oracle).abs() < 1e-10);
    }

    #[test]
    fn wmape_smape_hand_values() {
        let g = QuantileGrid::uniform(9);
        let t = orig(&g, vec![100.0; 9]);
        let p = orig(&g, vec![50.0; 9]);
        let w = wmape(&[p.clone()], &[t.clone()]).unwrap();
        assert!((w - 50.0).abs() < 1e-12);
        let (s, _) = smape(&[p], &[t.clone()]).unwrap();
        assert!((s - 200.0 * 50.0 / 150.0).abs() < 1e-9);
        let (zero, _) = smape(&[t.clone()], &[t.clone()]).unwrap();
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn smape_bounded_by_200() {
        let g = QuantileGrid::uniform(9);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let t = orig(&g, vec![rng.gen_range(0.01..100.0); 9]);
            let p = orig(&g, vec![rng.gen_range(0.01..100.0); 9]);
            let (s, _) = smape(&[p], &[t]).unwrap();
            assert!(s <= 200.0 + 1e-12);
        }
    }

    #[test]
    fn crps_degenerate_equals_abs_gap() {
        let g = QuantileGrid::uniform(99);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let a: f64 = rng.gen_range(0.0..10.0);
            let y: f64 = rng.gen_range(0.0..10.0);
            let pred = orig(&g, vec![a; 99]);
            let got = crps(&pred, y);
            assert!(
                (got - (a - y).abs()).abs() < 1e-12,
                "crps {got} vs |a-y| {}",
                (a - y).abs()
            );
        }
    }

    #[test]
    fn crps_minimized_at_center() {
        let g = QuantileGrid::uniform(99);
        let normal = statrs::distribution::Normal::new(0.0, 1.0).unwrap();
        use statrs::distribution::ContinuousCDF;
        let pred = orig(&g, g.levels().iter().map(|&t| normal.inverse_cdf(t)).collect());
        let at_center = crps(&pred, 0.0);
        for y in [-2.0, -0.5, 0.5, 2.0] {
            assert!(crps(&pred, y) > at_center);
        }
    }

    #[test]
    fn crps_standard_normal_matches_monte_carlo_oracle() {
        // grid CRPS of N(0,1) predictive quantiles vs outcome 0, against the
        // sample-based oracle E|X−y| − ½E|X−X'| with 10^6 draws
        let g = QuantileGrid::uniform(99);
        let normal = statrs::distribution::Normal::new(0.0, 1.0).unwrap();
        use statrs::distribution::ContinuousCDF;
        let pred = orig(&g, g.levels().iter().map(|&t| normal.inverse_cdf(t)).collect());
        let got = crps(&pred, 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(777);
        let sampler = rand_distr::Normal::new(0.0f64, 1.0).unwrap();
        let n = 1_000_000usize;
        let xs: Vec<f64> = (0..n).map(|_| sampler.sample(&mut rng)).collect();
        let e_abs: f64 = xs.iter().map(|x| x.abs()).sum::<f64>() / n as f64;
        // pair consecutive draws for the X, X' term
        let e_pair: f64 = xs.chunks_exact(2).map(|c| (c[0] - c[1]).abs()).sum::<f64>() / (n / 2) as f64;
        let oracle = e_abs - 0.5 * e_pair;
        assert!((got - oracle).abs() < 1e-2, "grid {got} oracle {oracle}");
        // sanity: close to the closed form σ(√2−1)/√π = 0.23369
        assert!((got - 0.23369).abs() < 5e-3);
    }

    fn make_cases(n: usize, seed: u64) -> (Vec<EvalCase>, QuantileVector) {
        let g = QuantileGrid::uniform(9);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cases = Vec::new();
        for i in 0..n {
            let base: f64 = rng.gen_range(50.0..150.0);
            let values: Vec<f64> = (0..9).map(|k| base + 5.0 * k as f64).collect();
            let pred = orig(&g, values.iter().map(|v| v * rng.gen_range(0.9..1.1)).collect());
            let target = orig(&g, values.clone());
            let outcomes: Vec<f64> = (0..8).map(|_| base + rng.gen_range(0.0..40.0)).collect();
            cases.push(EvalCase { id: format!("i{i:04}"), pred, target, outcomes });
        }
        let reference = orig(&g, (0..9).map(|k| 60.0 + 10.0 * k as f64).collect());
        (cases, reference)
    }

    #[test]
    fn crpss_null_and_perfect() {
        let (cases, reference) = make_cases(30, 3);
        // model identical to the reference forecast -> skill 0
        let null_cases: Vec<EvalCase> = cases
            .iter()
            .map(|c| EvalCase {
                id: c.id.clone(),
                pred: reference.clone(),
                target: c.target.clone(),
                outcomes: c.outcomes.clone(),
            })
            .collect();
        let (skill, _) = crpss(&null_cases, &reference).unwrap();
        assert!(skill.abs() < 1e-9);

        // perfect point forecasts of point outcomes -> skill 1
        let g = QuantileGrid::uniform(9);
        let point_cases: Vec<EvalCase> = (0..10)
            .map(|i| {
                let y = 10.0 + i as f64;
                EvalCase {
                    id: format!("p{i}"),
                    pred: orig(&g, vec![y; 9]),
                    target: orig(&g, vec![y; 9]),
                    outcomes: vec![y],
                }
            })
            .collect();
        let (skill1, model) = crpss(&point_cases, &reference).unwrap();
        assert!((skill1 - 1.0).abs() < 1e-12);
        assert_eq!(model, 0.0);
    }

    #[test]
    fn crpss_deterministic_across_runs() {
        let (cases, reference) = make_cases(50, 9);
        let a = crpss(&cases, &reference).unwrap().0;
        let b = crpss(&cases, &reference).unwrap().0;
        assert!((a - b).abs() < 1e-6);
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn rciw_pairs_on_dense_grid_match_stated_mapping() {
        let g = QuantileGrid::uniform(99);
        let l = g.levels();
        let (a, b) = rciw_pair(&g, 90);
        assert!((l[a] - 0.05).abs() < 1e-12 && (l[b] - 0.95).abs() < 1e-12);
        let (a, b) = rciw_pair(&g, 95);
        assert!((l[a] - 0.02).abs() < 1e-12 && (l[b] - 0.98).abs() < 1e-12);
        let (a, b) = rciw_pair(&g, 99);
        assert!((l[a] - 0.01).abs() < 1e-12 && (l[b] - 0.99).abs() < 1e-12);
    }

    #[test]
    fn rciw_direct_formula() {
        let g = QuantileGrid::uniform(99);
        let mut values = vec![100.0; 99];
        let (lo, hi) = rciw_pair(&g, 90);
        values[lo] = 90.0;
        values[hi] = 110.0;
        let pred = orig(&g, values);
        let target = orig(&g, vec![100.0; 99]);
        let (v, ex) = rciw(&[pred], &[target.clone()], 90).unwrap();
        assert!((v - 20.0).abs() < 1e-12);
        assert_eq!(ex, 0);
        // zero-width intervals
        let flat = orig(&g, vec![70.0; 99]);
        let (z, _) = rciw(&[flat], &[target], 90).unwrap();
        assert_eq!(z, 0.0);
    }

    #[test]
    fn metrics_scale_equivariant() {
        let (cases, reference) = make_cases(25, 41);
        let r1 = evaluate_all(&cases, &reference).unwrap();
        let c = 3.7;
        let scaled: Vec<EvalCase> = cases
            .iter()
            .map(|case| EvalCase {
                id: case.id.clone(),
                pred: orig(&case.pred.grid, case.pred.values.iter().map(|v| v * c).collect()),
                target: orig(&case.target.grid, case.target.values.iter().map(|v| v * c).collect()),
                outcomes: case.outcomes.iter().map(|v| v * c).collect(),
            })
            .collect();
        let ref_scaled = orig(&reference.grid, reference.values.iter().map(|v| v * c).collect());
        let r2 = evaluate_all(&scaled, &ref_scaled).unwrap();
        assert!((r1.avg_mape - r2.avg_mape).abs() < 1e-9);
        assert!((r1.wmape - r2.wmape).abs() < 1e-9);
        assert!((r1.smape - r2.smape).abs() < 1e-9);
        assert!((r1.crpss - r2.crpss).abs() < 1e-9);
        for (x, y) in r1.rciw.iter().zip(&r2.rciw) {
            assert!((x.1 - y.1).abs() < 1e-9);
        }
        assert_eq!(r1.excluded, 0);
    }

    #[test]
    fn metrics_invariant_to_instance_order() {
        let (mut cases, reference) = make_cases(20, 55);
        let r1 = evaluate_all(&cases, &reference).unwrap();
        cases.reverse();
        let r2 = evaluate_all(&cases, &reference).unwrap();
        assert!((r1.avg_mape - r2.avg_mape).abs() < 1e-10);
        assert!((r1.crpss - r2.crpss).abs() < 1e-10);
    }

    #[test]
    fn t_test_matches_reference_implementation() {
        // frozen oracle values from an independent statistical implementation
        let a = [3.1, 2.7, 4.0, 3.3, 2.9, 3.8, 3.5, 2.6, 3.0, 3.9, 4.2, 2.8];
        let b = [2.5, 2.9, 3.1, 2.7, 2.2, 3.6, 3.0, 2.1, 2.8, 3.2, 3.5, 2.4];
        let rep = paired_t_test(&a, &b).unwrap();
        assert!((rep.delta - (-0.4833333333333332)).abs() < 1e-12);
        assert!((rep.t_stat - (-5.6190193841621916)).abs() < 1e-6);
        assert!((rep.p_value - 0.0001558312666027).abs() < 1e-9);
        assert!((rep.ci95.0 - (-0.6726563132537359)).abs() < 1e-6);
        assert!((rep.ci95.1 - (-0.2940103534129306)).abs() < 1e-6);
        assert!(rep.ci95.0 <= rep.delta && rep.delta <= rep.ci95.1);

        let a2 = [
            10.00123, 10.298746, 9.725862, 9.109408, 9.545329, 9.008353, 10.060144, 11.340215,
            9.507793, 9.379525, 10.489842, 10.356887, 10.105414, 9.069532, 9.970748, 10.695303,
            8.655785, 9.542384, 8.098777, 8.710462, 8.158265, 9.764909, 8.732554, 10.271264,
            10.156751,
        ];
        let b2 = [
            9.976458, 9.342042, 9.560385, 9.140008, 9.640653, 8.446299, 9.919043, 10.998807,
            9.234258, 9.853884, 10.216828, 10.393878, 10.50917, 8.886092, 9.976067, 10.789489,
            8.731298, 9.102362, 8.179233, 9.303991, 7.589407, 10.158662, 8.830296, 10.064676,
            11.006918,
        ];
        let rep2 = paired_t_test(&a2, &b2).unwrap();
        assert!((rep2.t_stat - (-0.457068441273)).abs() < 1e-6);
        assert!((rep2.p_value - 0.651732188891).abs() < 1e-6);
    }

    #[test]
    fn t_test_error_paths() {
        let a = [1.0, 2.0, 3.0];
        assert!(matches!(paired_t_test(&a, &a), Err(Error::ZeroVariance)));
        assert!(matches!(paired_t_test(&[1.0], &[2.0]), Err(Error::TooFewPairs(1))));
    }

    #[test]
    fn t_test_shifted_pairs_simulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let noise = rand_distr::Normal::new(0.0f64, 0.1).unwrap();
        let n = 1000;
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(5.0..15.0)).collect();
        let b: Vec<f64> = a.iter().map(|x| x - 1.0 + noise.sample(&mut rng)).collect();
        let rep = paired_t_test(&a, &b).unwrap();
        assert!((rep.delta + 1.0).abs() < 0.02);
        assert!(rep.p_value < 0.001);
    }

    #[test]
    fn flat_block_field_names() {
        let (cases, reference) = make_cases(5, 1);
        let rep = evaluate_all(&cases, &reference).unwrap();
        let block = rep.to_flat_block();
        for key in ["avg_mape", "wmape", "smape", "crpss", "rciw90", "rciw95", "rciw99", "n", "excluded"] {
            assert!(block.lines().any(|l| l.starts_with(key)), "missing {key}");
        }
        assert_eq!(MetricReport::csv_header().split(',').count(), rep.csv_row().split(',').count());
    }

    #[test]
    fn zero_target_excluded_with_tally() {
        let g = QuantileGrid::uniform(9);
        let t_ok = orig(&g, vec![100.0; 9]);
        let t_zero = orig(&g, vec![0.0; 9]);
        let p = orig(&g, vec![90.0; 9]);
        let (m, ex) = mape_at(&[p.clone(), p.clone()], &[t_ok, t_zero], 0.5).unwrap();
        assert_eq!(ex, 1);
        assert!((m - 10.0).abs() < 1e-12);
    }
}
