//! Empirical CDF and quantile construction.
//!
//! Maps variable-size outcome sets to fixed quantile grids via the
//! fractional-rank rule `r = 1 + (M-1)·τ` with linear interpolation
//! between adjacent order statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which units a quantile vector is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Original,
    Log,
}

impl Space {
    pub fn name(self) -> &'static str {
        match self {
            Space::Original => "original",
            Space::Log => "log",
        }
    }
}

/// A multiset of observed real outcomes, stored sorted ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeSet {
    values: Vec<f64>,
}

impl OutcomeSet {
    /// Builds an outcome set, sorting values ascending. Duplicates are kept.
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyOutcomes);
        }
        if let Some(idx) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteOutcome(idx));
        }
        values.sort_by(|a, b| a.partial_cmp(b).expect("finite values compare"));
        Ok(Self { values })
    }

    /// Sorted order statistics `y_(1) <= ... <= y_(M)`.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn count(&self) -> usize {
        self.values.len()
    }

    /// Natural log of every outcome; requires all values positive.
    pub fn to_log(&self) -> Result<OutcomeSet> {
        if let Some(idx) = self.values.iter().position(|&v| v <= 0.0) {
            return Err(Error::NonPositiveLog { idx, value: self.values[idx] });
        }
        // log is monotone, so sorted order is preserved.
        Ok(OutcomeSet { values: self.values.iter().map(|v| v.ln()).collect() })
    }

    /// Sample median under the same interpolation rule as the grid targets.
    pub fn median(&self) -> f64 {
        interpolate_at(&self.values, 0.5)
    }
}

/// A strictly increasing set of quantile levels in (0,1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileGrid {
    levels: Vec<f64>,
}

impl QuantileGrid {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::InvalidGrid);
        }
        for (i, &t) in levels.iter().enumerate() {
            if !(t > 0.0 && t < 1.0) || !t.is_finite() {
                return Err(Error::InvalidGrid);
            }
            if i > 0 && levels[i - 1] >= t {
                return Err(Error::InvalidGrid);
            }
        }
        Ok(Self { levels })
    }

    /// Uniform grid `{1/(q+1), ..., q/(q+1)}`; `uniform(99)` gives 0.01..0.99.
    pub fn uniform(q: usize) -> Self {
        let denom = (q + 1) as f64;
        let levels = (1..=q).map(|k| k as f64 / denom).collect();
        Self { levels }
    }

    /// The nine representative percentiles {1,5,10,25,50,75,90,95,99}.
    pub fn representative() -> Self {
        Self { levels: vec![0.01, 0.05, 0.10, 0.25, 0.50, 0.75, 0.90, 0.95, 0.99] }
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Index of the level numerically closest to `tau`.
    pub fn closest(&self, tau: f64) -> usize {
        let mut best = 0;
        let mut best_gap = f64::INFINITY;
        for (i, &t) in self.levels.iter().enumerate() {
            let gap = (t - tau).abs();
            if gap < best_gap {
                best_gap = gap;
                best = i;
            }
        }
        best
    }

    /// Index of a level exactly matching `tau` (within float dust).
    pub fn position(&self, tau: f64) -> Option<usize> {
        let i = self.closest(tau);
        if (self.levels[i] - tau).abs() < 1e-9 {
            Some(i)
        } else {
            None
        }
    }
}

/// Values on a quantile grid, in original or log units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileVector {
    pub grid: QuantileGrid,
    pub values: Vec<f64>,
    pub space: Space,
}

impl QuantileVector {
    pub fn new(grid: QuantileGrid, values: Vec<f64>, space: Space) -> Result<Self> {
        if grid.len() != values.len() {
            return Err(Error::LengthMismatch { left: grid.len(), right: values.len() });
        }
        Ok(Self { grid, values, space })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Elementwise natural log; errors on the first non-positive entry.
    pub fn to_log_space(&self) -> Result<QuantileVector> {
        if self.space == Space::Log {
            return Err(Error::SpaceMismatch { expected: "original", got: "log" });
        }
        let mut values = Vec::with_capacity(self.values.len());
        for (idx, &v) in self.values.iter().enumerate() {
            if v <= 0.0 {
                return Err(Error::NonPositiveLog { idx, value: v });
            }
            values.push(v.ln());
        }
        Ok(QuantileVector { grid: self.grid.clone(), values, space: Space::Log })
    }

    /// Elementwise exp back to original units.
    pub fn from_log_space(&self) -> Result<QuantileVector> {
        if self.space == Space::Original {
            return Err(Error::SpaceMismatch { expected: "log", got: "original" });
        }
        let mut values = Vec::with_capacity(self.values.len());
        for &v in &self.values {
            let e = v.exp();
            if !e.is_finite() {
                return Err(Error::ExpOverflow(v));
            }
            values.push(e);
        }
        Ok(QuantileVector { grid: self.grid.clone(), values, space: Space::Original })
    }

    /// Value at an exact grid level, if present.
    pub fn at_level(&self, tau: f64) -> Option<f64> {
        self.grid.position(tau).map(|i| self.values[i])
    }

    pub fn is_non_decreasing(&self) -> bool {
        self.values.windows(2).all(|w| w[0] <= w[1])
    }
}

/// Right-continuous empirical CDF over an outcome set.
#[derive(Debug, Clone)]
pub struct EmpiricalCdf {
    source: OutcomeSet,
}

impl EmpiricalCdf {
    pub fn source(&self) -> &OutcomeSet {
        &self.source
    }

    /// `F̂(t) = #{y_m <= t} / M`.
    pub fn eval(&self, t: f64) -> f64 {
        let v = self.source.values();
        // partition_point gives the count of values <= t on sorted data.
        let count = v.partition_point(|&y| y <= t);
        count as f64 / v.len() as f64
    }
}

/// Builds the empirical CDF `F̂(t) = (1/M)·#{y_m <= t}`.
pub fn empirical_cdf(outcomes: &OutcomeSet) -> EmpiricalCdf {
    EmpiricalCdf { source: outcomes.clone() }
}

/// Fractional-rank interpolation at a single level over sorted values.
///
/// `r = 1 + (M-1)·τ`; result is `(1-w)·y_(⌊r⌋) + w·y_(⌈r⌉)` with `w = r - ⌊r⌋`.
pub fn interpolate_at(sorted: &[f64], tau: f64) -> f64 {
    let m = sorted.len();
    let r = 1.0 + (m as f64 - 1.0) * tau;
    let lo = r.floor() as usize - 1;
    let hi = r.ceil() as usize - 1;
    let w = r - r.floor();
    (1.0 - w) * sorted[lo] + w * sorted[hi]
}

/// Interpolates an outcome set's empirical quantile function to a grid.
pub fn interpolate_quantiles(
    outcomes: &OutcomeSet,
    grid: &QuantileGrid,
    space: Space,
) -> QuantileVector {
    let values = grid.levels().iter().map(|&t| interpolate_at(outcomes.values(), t)).collect();
    QuantileVector { grid: grid.clone(), values, space }
}
