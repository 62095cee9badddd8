//! Weighted statistics over per-batch quantities.
//!
//! Every function takes one value per batch plus a [`WeightVector`]; the
//! weighted expectation is `E_β[h] = Σ_b (β^b / β^B) h^b`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, normalize};
use crate::types::WeightVector;

/// Approximate top eigenpair of a weighted covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct EigPair {
    /// Unit vector.
    pub u: Vec<f64>,
    /// Rayleigh quotient `uᵀ Cov u`.
    pub lambda: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn check_lengths(m: usize, beta: &WeightVector) -> Result<f64> {
    if m != beta.len() {
        return Err(Error::Argument(format!(
            "{m} values for {} weights",
            beta.len()
        )));
    }
    let total = beta.total();
    if total <= 0.0 {
        return Err(Error::DegenerateWeights);
    }
    Ok(total)
}

/// β-weighted mean of per-batch vectors.
pub fn weighted_mean(values: &[Vec<f64>], beta: &WeightVector) -> Result<Vec<f64>> {
    let total = check_lengths(values.len(), beta)?;
    let d = values[0].len();
    if values.iter().any(|v| v.len() != d) {
        return Err(Error::Argument("per-batch vectors differ in length".into()));
    }
    let mut mean = vec![0.0; d];
    for (v, &w) in values.iter().zip(beta.as_slice()) {
        if w > 0.0 {
            axpy(w / total, v, &mut mean);
        }
    }
    Ok(mean)
}

/// β-weighted mean of per-batch scalars.
pub fn weighted_scalar_mean(values: &[f64], beta: &WeightVector) -> Result<f64> {
    let total = check_lengths(values.len(), beta)?;
    Ok(values
        .iter()
        .zip(beta.as_slice())
        .filter(|(_, &w)| w > 0.0)
        .map(|(v, w)| w * v)
        .sum::<f64>()
        / total)
}

/// β-weighted variance `Σ_b (β^b/β^B)(h^b − E_β[h])²`.
pub fn weighted_variance(values: &[f64], beta: &WeightVector) -> Result<f64> {
    let mean = weighted_scalar_mean(values, beta)?;
    let total = beta.total();
    Ok(values
        .iter()
        .zip(beta.as_slice())
        .filter(|(_, &w)| w > 0.0)
        .map(|(v, w)| w * (v - mean) * (v - mean))
        .sum::<f64>()
        / total)
}

/// Top eigenvector of `Cov_β(values)` by matrix-free power iteration.
///
/// The covariance is never formed; each step applies
/// `v ↦ Σ_b (β^b/β^B)(z^b − μ)((z^b − μ)·v)`. Iteration stops when the
/// Rayleigh quotient changes by at most `tol` relative to its magnitude.
/// On exhausting `max_iter` the best iterate is returned with
/// `converged = false`.
pub fn cov_top_eig(
    values: &[Vec<f64>],
    beta: &WeightVector,
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> Result<EigPair> {
    let total = check_lengths(values.len(), beta)?;
    let mean = weighted_mean(values, beta)?;
    let d = mean.len();
    if d == 0 {
        return Err(Error::Argument("cannot take eigenvectors in dimension 0".into()));
    }
    let centered: Vec<(f64, Vec<f64>)> = values
        .iter()
        .zip(beta.as_slice())
        .filter(|(_, &w)| w > 0.0)
        .map(|(v, &w)| (w / total, v.iter().zip(&mean).map(|(a, b)| a - b).collect()))
        .collect();
    let trace: f64 = centered.iter().map(|(p, c)| p * dot(c, c)).sum();

    let apply = |v: &[f64], out: &mut [f64]| {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (p, c) in &centered {
            axpy(p * dot(c, v), c, out);
        }
    };
    let rayleigh = |v: &[f64]| -> f64 {
        centered
            .iter()
            .map(|(p, c)| {
                let t = dot(c, v);
                p * t * t
            })
            .sum()
    };

    let start = |seed: u64| -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v: Vec<f64> = (0..d).map(|_| rng.random::<f64>() - 0.5).collect();
        if normalize(&mut v) == 0.0 {
            v[0] = 1.0;
        }
        v
    };

    if trace <= 0.0 {
        return Ok(EigPair { u: start(seed), lambda: 0.0, iterations: 0, converged: true });
    }

    let run = |mut v: Vec<f64>| -> EigPair {
        let mut next = vec![0.0; d];
        let mut lambda = rayleigh(&v);
        let mut best = EigPair { u: v.clone(), lambda, iterations: 0, converged: false };
        for it in 1..=max_iter {
            apply(&v, &mut next);
            if normalize(&mut next) == 0.0 {
                best.iterations = it;
                return best;
            }
            std::mem::swap(&mut v, &mut next);
            let updated = rayleigh(&v);
            if updated > best.lambda {
                best = EigPair { u: v.clone(), lambda: updated, iterations: it, converged: false };
            }
            let done = (updated - lambda).abs() <= tol * updated.abs().max(f64::MIN_POSITIVE);
            lambda = updated;
            if done {
                best.iterations = it;
                best.converged = true;
                return best;
            }
        }
        best.iterations = max_iter;
        best
    };

    let first = run(start(seed));
    // A start vector orthogonal to the top eigenspace stalls at zero.
    if first.lambda <= trace * 1e-12 {
        let second = run(start(seed ^ 0x9E37_79B9_7F4A_7C15));
        if second.lambda > first.lambda {
            return Ok(second);
        }
    }
    Ok(first)
}

/// Groups `(value, weight)` pairs sorted by value in the given order into
/// tie blocks and returns the value of the first block whose inclusion
/// makes the running weight exceed `mass`; `fallback` when none does.
fn first_block_exceeding(sorted: &[(f64, f64)], mass: f64, fallback: f64) -> f64 {
    let mut acc = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i].0;
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == v {
            acc += sorted[j].1;
            j += 1;
        }
        if acc > mass {
            return v;
        }
        i = j;
    }
    fallback
}

fn paired(values: &[f64], beta: &WeightVector) -> Result<Vec<(f64, f64)>> {
    if values.is_empty() {
        return Err(Error::Argument("no values".into()));
    }
    if values.len() != beta.len() {
        return Err(Error::Argument(format!(
            "{} values for {} weights",
            values.len(),
            beta.len()
        )));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Argument("NaN score".into()));
    }
    Ok(values.iter().copied().zip(beta.as_slice().iter().copied()).collect())
}

/// `inf { v : Σ_{b : values^b ≥ v} β^b ≤ mass }`, realized at a data value.
///
/// Returns `min(values)` when even the full weight is at most `mass`.
pub fn weighted_upper_quantile(values: &[f64], beta: &WeightVector, mass: f64) -> Result<f64> {
    if !(mass >= 0.0) {
        return Err(Error::Argument(format!("mass must be non-negative, got {mass}")));
    }
    let mut pairs = paired(values, beta)?;
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let min = pairs.last().map(|p| p.0).unwrap_or(f64::NAN);
    Ok(first_block_exceeding(&pairs, mass, min))
}

/// `sup { z : Σ_{b : values^b < z} β^b ≤ mass }`, the mirror image of
/// [`weighted_upper_quantile`]; returns `max(values)` when the full weight is
/// at most `mass`.
pub fn weighted_lower_quantile(values: &[f64], beta: &WeightVector, mass: f64) -> Result<f64> {
    if !(mass >= 0.0) {
        return Err(Error::Argument(format!("mass must be non-negative, got {mass}")));
    }
    let mut pairs = paired(values, beta)?;
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let max = pairs.last().map(|p| p.0).unwrap_or(f64::NAN);
    Ok(first_block_exceeding(&pairs, mass, max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn wv(w: &[f64]) -> WeightVector {
        WeightVector::new(w.to_vec()).unwrap()
    }

    #[test]
    fn mean_examples() {
        let vals = vec![vec![1.0, 0.0], vec![3.0, 0.0]];
        assert_eq!(weighted_mean(&vals, &wv(&[1.0, 1.0])).unwrap(), vec![2.0, 0.0]);
        assert_eq!(weighted_mean(&vals, &wv(&[1.0, 0.0])).unwrap(), vec![1.0, 0.0]);
        assert_eq!(
            weighted_mean(&vals, &wv(&[0.0, 0.0])),
            Err(Error::DegenerateWeights)
        );
    }

    #[test]
    fn variance_examples() {
        assert_eq!(weighted_variance(&[1.0, 3.0], &wv(&[1.0, 1.0])).unwrap(), 1.0);
        assert_eq!(weighted_variance(&[2.0, 2.0, 2.0], &wv(&[1.0, 0.3, 0.7])).unwrap(), 0.0);
        // mean = 10/4 = 2.5; (3*6.25 + 56.25)/4 = 18.75
        assert_relative_eq!(
            weighted_variance(&[0.0, 10.0], &wv(&[1.0, 1.0 / 3.0])).unwrap(),
            18.75,
            epsilon = 1e-12
        );
        assert_eq!(
            weighted_variance(&[1.0], &wv(&[0.0])),
            Err(Error::DegenerateWeights)
        );
    }

    #[test]
    fn eig_rank_one() {
        let vals = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        let e = cov_top_eig(&vals, &wv(&[1.0, 1.0]), 1e-10, 1000, 7).unwrap();
        assert_relative_eq!(e.lambda, 1.0, epsilon = 1e-9);
        assert_relative_eq!(e.u[0].abs(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn eig_zero_covariance() {
        let vals = vec![vec![2.0, 5.0]; 4];
        let e = cov_top_eig(&vals, &wv(&[1.0; 4]), 1e-6, 1000, 1).unwrap();
        assert_eq!(e.lambda, 0.0);
        assert_relative_eq!(crate::linalg::norm(&e.u), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn eig_start_orthogonal_to_top_direction_restarts() {
        // start vectors are random, so emulate the stall by checking the
        // result on a rank-one covariance along an axis.
        let vals = vec![vec![0.0, 3.0], vec![0.0, -3.0]];
        let e = cov_top_eig(&vals, &wv(&[1.0, 1.0]), 1e-10, 1000, 3).unwrap();
        assert_relative_eq!(e.lambda, 9.0, epsilon = 1e-9);
    }

    #[test]
    fn eig_diag_cloud_matches_dense_oracle() {
        // symmetric design with exact covariance diag(4, 1)
        let vals = vec![
            vec![2.0, 1.0],
            vec![-2.0, 1.0],
            vec![2.0, -1.0],
            vec![-2.0, -1.0],
        ];
        let beta = wv(&[1.0; 4]);
        let e = cov_top_eig(&vals, &beta, 1e-6, 1000, 11).unwrap();
        let mean = weighted_mean(&vals, &beta).unwrap();
        let mut cov = nalgebra::Matrix2::<f64>::zeros();
        for v in &vals {
            let c = nalgebra::Vector2::new(v[0] - mean[0], v[1] - mean[1]);
            cov += c * c.transpose() / 4.0;
        }
        let top = cov.symmetric_eigen().eigenvalues.max();
        assert!((e.lambda - top).abs() <= 0.01 * top);
        assert!(e.u[0].abs() > 0.99);
    }

    #[test]
    fn eig_deterministic_for_seed() {
        let vals: Vec<Vec<f64>> = (0..20)
            .map(|i| vec![(i as f64).sin(), (i as f64 * 0.7).cos(), i as f64 * 0.01])
            .collect();
        let beta = wv(&[1.0; 20]);
        let a = cov_top_eig(&vals, &beta, 1e-8, 500, 42).unwrap();
        let b = cov_top_eig(&vals, &beta, 1e-8, 500, 42).unwrap();
        assert_eq!(a, b);
    }

    /// Scans every data value `c` and returns the smallest one for which all
    /// thresholds just above `c` carry upper-tail weight at most `mass`.
    fn brute_upper(values: &[f64], w: &[f64], mass: f64) -> f64 {
        let mut cands: Vec<f64> = values.to_vec();
        cands.sort_by(f64::total_cmp);
        cands.dedup();
        let tail = |v: f64| -> f64 {
            values.iter().zip(w).filter(|(x, _)| **x >= v).map(|(_, w)| w).sum()
        };
        cands
            .iter()
            .enumerate()
            .find(|&(i, &c)| {
                let just_above = cands.get(i + 1).map_or(c + 1.0, |n| (c + n) / 2.0);
                tail(just_above) <= mass
            })
            .map(|(_, &c)| c)
            .unwrap()
    }

    #[test]
    fn upper_quantile_examples() {
        let ones = wv(&[1.0; 4]);
        assert_eq!(weighted_upper_quantile(&[1.0, 2.0, 3.0, 4.0], &ones, 1.0).unwrap(), 3.0);
        assert_eq!(brute_upper(&[1.0, 2.0, 3.0, 4.0], &[1.0; 4], 1.0), 3.0);
        assert_eq!(weighted_upper_quantile(&[1.0, 2.0, 3.0, 4.0], &ones, 4.0).unwrap(), 1.0);
        assert_eq!(weighted_upper_quantile(&[1.0, 2.0, 3.0, 4.0], &ones, 9.0).unwrap(), 1.0);
        assert_eq!(weighted_upper_quantile(&[1.0, 2.0, 3.0, 4.0], &ones, 0.0).unwrap(), 4.0);
        assert_eq!(brute_upper(&[1.0, 2.0, 3.0, 4.0], &[1.0; 4], 0.0), 4.0);
        assert!(weighted_upper_quantile(&[1.0], &wv(&[1.0]), -1.0).is_err());
    }

    #[test]
    fn ties_move_as_a_block() {
        let beta = wv(&[1.0; 4]);
        // the two 3s together carry weight 2 > 1.5
        assert_eq!(weighted_upper_quantile(&[1.0, 3.0, 3.0, 0.0], &beta, 1.5).unwrap(), 3.0);
        assert_eq!(weighted_upper_quantile(&[1.0, 3.0, 3.0, 0.0], &beta, 2.0).unwrap(), 1.0);
    }

    #[test]
    fn lower_quantile_mirrors_upper() {
        let ones = wv(&[1.0; 8]);
        let z: Vec<f64> = (1..=8).map(f64::from).collect();
        assert_eq!(weighted_lower_quantile(&z, &ones, 1.0).unwrap(), 2.0);
        assert_eq!(weighted_upper_quantile(&z, &ones, 1.0).unwrap(), 7.0);
    }

    fn weighted_set() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..15).prop_flat_map(|m| {
            (
                proptest::collection::vec((-5i32..5).prop_map(|v| v as f64 * 0.5), m),
                proptest::collection::vec(prop_oneof![Just(0.0), 0.0f64..=1.0, Just(1.0)], m),
            )
        })
    }

    proptest! {
        #[test]
        fn upper_quantile_is_the_infimum((values, w) in weighted_set(), mass in 0.0f64..6.0) {
            let beta = WeightVector::new(w.clone()).unwrap();
            let v = weighted_upper_quantile(&values, &beta, mass).unwrap();
            let tail = |t: f64| -> f64 {
                values.iter().zip(&w).filter(|(x, _)| **x >= t).map(|(_, w)| w).sum()
            };
            let mut grid = values.clone();
            grid.sort_by(f64::total_cmp);
            grid.dedup();
            // every threshold strictly above v satisfies the condition
            for &g in grid.iter().filter(|&&g| g > v) {
                prop_assert!(tail(g) <= mass + 1e-12);
            }
            prop_assert!(tail(v + 1e-9) <= mass + 1e-12);
            if mass < beta.total() - 1e-12 {
                prop_assert!(tail(v - 1e-9) > mass);
            } else {
                prop_assert_eq!(v, grid[0]);
            }
        }

        #[test]
        fn zero_weight_batches_change_nothing(
            (values, w) in weighted_set(),
            extra in proptest::collection::vec(-10.0f64..10.0, 0..5),
        ) {
            prop_assume!(w.iter().sum::<f64>() > 0.0);
            let beta = WeightVector::new(w.clone()).unwrap();
            let mean = weighted_scalar_mean(&values, &beta).unwrap();
            let var = weighted_variance(&values, &beta).unwrap();
            let mut v2 = values.clone();
            v2.extend(&extra);
            let mut w2 = w.clone();
            w2.extend(std::iter::repeat_n(0.0, extra.len()));
            let beta2 = WeightVector::new(w2).unwrap();
            prop_assert!((weighted_scalar_mean(&v2, &beta2).unwrap() - mean).abs() < 1e-12);
            prop_assert!((weighted_variance(&v2, &beta2).unwrap() - var).abs() < 1e-12);
        }
    }
}
