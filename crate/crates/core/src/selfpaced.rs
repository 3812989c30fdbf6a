//! Self-paced sample selection with a capped likelihood.
//!
//! A sample is selected when its likelihood clears the cap threshold `epsilon`
//! and `ln p + lambda > 0`. Both thresholds are derived per pace from
//! quantiles of the current likelihoods, so a pace is described by the
//! fraction of data it should admit rather than by raw threshold values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forest::DENSITY_FLOOR;

/// Slack added to `lambda` so the sample sitting exactly on the quantile is admitted.
pub const LAMBDA_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionState {
    pub v: Vec<bool>,
    pub lambda: f64,
    pub epsilon: f64,
    pub pace_index: usize,
}

impl SelectionState {
    /// Everything selected, no cap: the state used while pretraining.
    pub fn all(n: usize) -> Self {
        Self {
            v: vec![true; n],
            lambda: f64::INFINITY,
            epsilon: 0.0,
            pace_index: 0,
        }
    }

    pub fn selected_count(&self) -> usize {
        self.v.iter().filter(|&&v| v).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PaceSchedule {
    pub fractions: Vec<f64>,
    pub exclude_fraction: f64,
}

impl Default for PaceSchedule {
    fn default() -> Self {
        Self::stepped(0.1, 0.1, 0.005)
    }
}

impl PaceSchedule {
    /// `start, start + step, ...` capped by a final pace at 1.0.
    pub fn stepped(start: f64, step: f64, exclude_fraction: f64) -> Self {
        let mut fractions = Vec::new();
        let mut i = 0;
        loop {
            let f = start + step * i as f64;
            if f >= 1.0 - 1e-9 || step <= 0.0 {
                break;
            }
            fractions.push(f);
            i += 1;
        }
        fractions.push(1.0);
        Self {
            fractions,
            exclude_fraction,
        }
    }

    /// A single pace over all data with no exclusion.
    pub fn baseline() -> Self {
        Self {
            fractions: vec![1.0],
            exclude_fraction: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fractions.is_empty() {
            return Err(Error::InvalidConfig(
                "pace schedule has no fractions".into(),
            ));
        }
        if let Some(f) = self.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(Error::InvalidConfig(format!(
                "pace fraction {f} outside (0, 1]"
            )));
        }
        if self.fractions.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidConfig(
                "pace fractions must be strictly increasing".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.exclude_fraction) {
            return Err(Error::InvalidConfig(format!(
                "exclude_fraction {} outside [0, 1)",
                self.exclude_fraction
            )));
        }
        Ok(())
    }
}

/// `p` if `p > epsilon`, otherwise 0. The boundary `p == epsilon` is capped.
pub fn capped_likelihood(p: f64, epsilon: f64) -> f64 {
    if p > epsilon {
        p
    } else {
        0.0
    }
}

/// Optimal binary selection for fixed model parameters.
///
/// `lambda` may be any real or `+inf`; quantile-derived values go negative
/// when densities exceed 1.
pub fn select(
    log_likelihoods: &[f64],
    likelihoods: &[f64],
    lambda: f64,
    epsilon: f64,
) -> Result<Vec<bool>> {
    if log_likelihoods.len() != likelihoods.len() {
        return Err(Error::shape(
            "likelihood vectors",
            log_likelihoods.len(),
            likelihoods.len(),
        ));
    }
    Ok(log_likelihoods
        .iter()
        .zip(likelihoods)
        .map(|(&ll, &p)| capped_likelihood(p, epsilon) > 0.0 && ll + lambda > 0.0)
        .collect())
}

fn count_for(fraction: f64, n: usize) -> usize {
    // guard against products like 0.3 * 10 = 3.0000000000000004
    let raw = (fraction * n as f64 - 1e-9).ceil();
    (raw.max(0.0) as usize).min(n)
}

/// Thresholds `(lambda, epsilon)` admitting about `ceil(target_fraction * N)`
/// samples while capping the worst `ceil(exclude_fraction * N)`.
pub fn schedule_thresholds(
    likelihoods: &[f64],
    target_fraction: f64,
    exclude_fraction: f64,
) -> Result<(f64, f64)> {
    if likelihoods.is_empty() {
        return Err(Error::EmptySelection("no likelihoods to rank".into()));
    }
    if !(target_fraction > 0.0 && target_fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "target fraction {target_fraction} outside (0, 1]"
        )));
    }
    if !(0.0..1.0).contains(&exclude_fraction) {
        return Err(Error::InvalidConfig(format!(
            "exclude fraction {exclude_fraction} outside [0, 1)"
        )));
    }
    let mut sorted = likelihoods.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();

    let keep = count_for(target_fraction, n).max(1);
    // a pace over the whole set admits samples whose density later falls
    // below today's minimum
    let q = if keep == n {
        DENSITY_FLOOR
    } else {
        sorted[n - keep]
    };
    let lambda = -q.max(DENSITY_FLOOR).ln() + LAMBDA_SLACK;

    let drop = count_for(exclude_fraction, n);
    let epsilon = if drop == 0 { 0.0 } else { sorted[drop - 1] };
    Ok((lambda, epsilon))
}
