//! Multifiltering of a soft cluster along one per-batch score.
//!
//! Given weights `β`, scores `z^b` and a variance threshold `θ` that the
//! weighted variance of `z` exceeds by the factor `c₃ log²(2/α)`, the filter
//! either
//!
//! * trims an `αβ^B/8` weight tail on each side to an interval `[a, b]` and,
//!   when the trimmed scores are already concentrated, shrinks every weight
//!   by its squared distance to that interval; or
//! * splits the cluster into two overlapping halves `{z ≥ z₀ − R}` and
//!   `{z < z₀ + R}` whose squared total weights sum to at most the square of
//!   the input's total weight.
//!
//! Either way every output has strictly smaller support than the input.
//!
//! Split radii are measured in units of `√θ`: the filter searches for the
//! split on `z / √θ`, so that `θ` plays the role of the unit variance bound
//! on genuine scores.

use crate::error::{Error, Result};
use crate::stats::{weighted_lower_quantile, weighted_upper_quantile, weighted_variance};
use crate::types::{FilterBranch, FilterOutcome, WeightVector};

/// Constant in the split-size condition `min(1 − β'/β, 1 − β''/β) ≥ 48 log(2/α) / R²`.
pub const SPLIT_CONSTANT: f64 = 48.0;

/// Center and radius of a two-way split, in the units of the scores it was
/// computed on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitParams {
    pub z0: f64,
    pub radius: f64,
}

impl SplitParams {
    /// Membership in the upper half `{z ≥ z₀ − R}`.
    pub fn in_upper(&self, z: f64) -> bool {
        z >= self.z0 - self.radius
    }

    /// Membership in the lower half `{z < z₀ + R}`.
    pub fn in_lower(&self, z: f64) -> bool {
        z < self.z0 + self.radius
    }

    /// Total weights of the two halves.
    pub fn half_weights(&self, beta: &WeightVector, z: &[f64]) -> (f64, f64) {
        let mut upper = 0.0;
        let mut lower = 0.0;
        for (&zb, &wb) in z.iter().zip(beta.as_slice()) {
            if self.in_upper(zb) {
                upper += wb;
            }
            if self.in_lower(zb) {
                lower += wb;
            }
        }
        (upper, lower)
    }

    /// Whether both split conditions hold for these weights and scores.
    pub fn is_valid(&self, beta: &WeightVector, z: &[f64], alpha: f64) -> bool {
        let total = beta.total();
        if !(self.radius > 0.0) || total <= 0.0 {
            return false;
        }
        let (upper, lower) = self.half_weights(beta, z);
        let contraction = upper * upper + lower * lower <= total * total;
        let slack = (1.0 - upper / total).min(1.0 - lower / total);
        contraction && slack >= split_requirement(alpha, self.radius)
    }
}

fn split_requirement(alpha: f64, radius: f64) -> f64 {
    SPLIT_CONSTANT * (2.0 / alpha).ln() / (radius * radius)
}

fn check_inputs(beta: &WeightVector, z: &[f64]) -> Result<()> {
    if z.len() != beta.len() {
        return Err(Error::Argument(format!(
            "{} scores for {} weights",
            z.len(),
            beta.len()
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("scores must be finite".into()));
    }
    if beta.total() <= 0.0 {
        return Err(Error::DegenerateWeights);
    }
    Ok(())
}

/// Interval `[a, b]` left after trimming weight `αβ^B/8` from each tail.
pub fn trim_bounds(beta: &WeightVector, z: &[f64], alpha: f64) -> Result<(f64, f64)> {
    check_inputs(beta, z)?;
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Argument(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    let mass = alpha * beta.total() / 8.0;
    let a = weighted_lower_quantile(z, beta, mass)?;
    let b = weighted_upper_quantile(z, beta, mass)?;
    Ok((a, b))
}

/// Shrinks each weight by `1 − f^b / max f`, where `f^b` is the squared
/// distance from `z^b` to `[a, b]` and the max runs over supported batches.
pub fn downweight(beta: &WeightVector, z: &[f64], a: f64, b: f64) -> Result<WeightVector> {
    check_inputs(beta, z)?;
    if !(a <= b) {
        return Err(Error::Argument(format!("empty interval [{a}, {b}]")));
    }
    let dist2 = |v: f64| {
        let gap = if v < a { a - v } else if v > b { v - b } else { 0.0 };
        gap * gap
    };
    let f: Vec<f64> = z.iter().map(|&v| dist2(v)).collect();
    let f_max = f
        .iter()
        .zip(beta.as_slice())
        .filter(|(_, &w)| w > 0.0)
        .fold(0.0f64, |acc, (&fb, _)| acc.max(fb));
    if f_max <= 0.0 {
        return Err(Error::NoProgress { a, b });
    }
    let new = f
        .iter()
        .zip(beta.as_slice())
        .map(|(&fb, &w)| if fb >= f_max { 0.0 } else { ((1.0 - fb / f_max) * w).clamp(0.0, w) })
        .collect();
    WeightVector::new(new)
}

/// Searches for a split satisfying both split conditions.
///
/// A split is determined by the gaps between consecutive distinct supported
/// scores that hold `L = z₀ − R` and `U = z₀ + R`. For each pair of gaps
/// `k ≤ j` the boundaries are placed an eighth of the way into the outer
/// edges of the gaps, which keeps `R` close to its supremum while staying off
/// the data. Among valid pairs the largest margin `min(q_lo, q_hi)·R²` wins,
/// where `q_lo` and `q_hi` are the weight fractions each half excludes; ties
/// go to the first pair in ascending `(k, j)` order.
pub fn find_split(beta: &WeightVector, z: &[f64], alpha: f64) -> Result<SplitParams> {
    check_inputs(beta, z)?;
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Argument(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    let total = beta.total();
    let mut pts: Vec<(f64, f64)> = z
        .iter()
        .zip(beta.as_slice())
        .filter(|(_, &w)| w > 0.0)
        .map(|(&v, &w)| (v, w))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));

    // distinct values with the weight fraction up to and including each
    let mut blocks: Vec<(f64, f64)> = Vec::new();
    let mut acc = 0.0;
    for (v, w) in pts {
        acc += w;
        match blocks.last_mut() {
            Some(last) if last.0 == v => last.1 = acc / total,
            _ => blocks.push((v, acc / total)),
        }
    }

    let requirement_unit = SPLIT_CONSTANT * (2.0 / alpha).ln();
    let gaps = blocks.len().saturating_sub(1);
    let mut candidates = 0usize;
    let mut valid: Vec<(f64, f64, f64)> = Vec::new();
    for k in 0..gaps {
        let q_lo = blocks[k].1;
        let lower_edge = blocks[k].0 + (blocks[k + 1].0 - blocks[k].0) / 8.0;
        for j in k..gaps {
            candidates += 1;
            let q_hi = 1.0 - blocks[j].1;
            let keep_hi = 1.0 - q_lo;
            let keep_lo = 1.0 - q_hi;
            if keep_hi * keep_hi + keep_lo * keep_lo > 1.0 {
                continue;
            }
            let upper_edge = blocks[j + 1].0 - (blocks[j + 1].0 - blocks[j].0) / 8.0;
            let radius = 0.5 * (upper_edge - lower_edge);
            let margin = q_lo.min(q_hi) * radius * radius;
            if margin >= requirement_unit {
                valid.push((margin, lower_edge, upper_edge));
            }
        }
    }
    // stable sort keeps scan order among equal margins
    valid.sort_by(|a, b| b.0.total_cmp(&a.0));
    for (_, l, u) in valid {
        let split = SplitParams { z0: 0.5 * (l + u), radius: 0.5 * (u - l) };
        if split.is_valid(beta, z, alpha) {
            return Ok(split);
        }
    }
    Err(Error::SearchExhausted {
        candidates,
        variance: weighted_variance(z, beta)?,
    })
}

/// One multifilter step. Requires `Var_β(z) > c₃ log²(2/α) θ`.
pub fn multifilter(
    beta: &WeightVector,
    z: &[f64],
    theta: f64,
    alpha: f64,
    c3: f64,
) -> Result<FilterOutcome> {
    check_inputs(beta, z)?;
    if !(theta > 0.0 && theta.is_finite()) {
        return Err(Error::Argument(format!("threshold must be positive, got {theta}")));
    }
    let log = (2.0 / alpha).ln();
    let threshold = c3 * log * log * theta;
    let variance = weighted_variance(z, beta)?;
    if !(variance > threshold) {
        return Err(Error::Contract(format!(
            "score variance {variance:.6e} does not exceed threshold {threshold:.6e}"
        )));
    }

    let (a, b) = trim_bounds(beta, z, alpha)?;
    let trimmed = beta.restricted(|i| z[i] >= a && z[i] <= b);
    let trimmed_variance = if trimmed.total() > 0.0 {
        weighted_variance(z, &trimmed)?
    } else {
        0.0
    };

    if trimmed_variance <= threshold / 2.0 {
        let new = downweight(beta, z, a, b)?;
        return Ok(FilterOutcome { new_weights: vec![new], branch: FilterBranch::Downweight });
    }

    let unit = theta.sqrt();
    let scaled: Vec<f64> = z.iter().map(|v| v / unit).collect();
    let split = find_split(beta, &scaled, alpha)?;
    let upper = beta.restricted(|i| split.in_upper(scaled[i]));
    let lower = beta.restricted(|i| split.in_lower(scaled[i]));
    Ok(FilterOutcome { new_weights: vec![upper, lower], branch: FilterBranch::Split })
}
