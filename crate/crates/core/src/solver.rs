//! Approximate stationary points of the β-weighted clipped loss.
//!
//! The objective `E_β[f^b(w, κ)]` is an average of Huber losses, hence convex
//! with gradient Lipschitz constant at most the top eigenvalue of the weighted
//! covariate second moment. Full-gradient descent with Armijo backtracking
//! reaches any positive gradient tolerance. The first step tries `1/L̂`; later
//! steps start the backtracking from the Barzilai-Borwein step, never below
//! `1/L̂`.

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm, normalize};
use crate::loss::{batch_grad_accumulate, check_kappa};
use crate::types::{BatchCollection, WeightVector};

pub const MAX_ITERATIONS: usize = 10_000;
const ARMIJO_SHRINK: f64 = 0.5;
const SUFFICIENT_DECREASE: f64 = 1e-4;
const MIN_STEP: f64 = 1e-30;
const MAX_STEP_RATIO: f64 = 1e8;

/// Long Barzilai-Borwein step `‖Δw‖² / ⟨Δw, Δg⟩`, if the curvature is positive.
fn barzilai_borwein(w: &[f64], next: &[f64], grad: &[f64], next_grad: &[f64]) -> Option<f64> {
    let mut ss = 0.0;
    let mut sy = 0.0;
    for i in 0..w.len() {
        let s = next[i] - w[i];
        ss += s * s;
        sy += s * (next_grad[i] - grad[i]);
    }
    (sy > 0.0 && ss > 0.0).then(|| ss / sy)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverReport {
    pub w: Vec<f64>,
    /// `‖E_β[∇f^b(w, κ)]‖` at the returned `w`.
    pub grad_norm: f64,
    /// `E_β[f^b(w, κ)]` at the returned `w`.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Weighted objective and gradient in one pass over the supported batches.
pub(crate) fn objective_and_grad(
    coll: &BatchCollection,
    beta: &WeightVector,
    w: &[f64],
    kappa: f64,
) -> (f64, Vec<f64>) {
    let total = beta.total();
    let mut grad = vec![0.0; coll.dim()];
    let mut obj = 0.0;
    for (batch, &wb) in coll.batches().iter().zip(beta.as_slice()) {
        if wb > 0.0 {
            let p = wb / total;
            obj += p * batch_grad_accumulate(batch, w, kappa, p, &mut grad);
        }
    }
    (obj, grad)
}

/// Largest eigenvalue of `Σ_b (β^b/β^B) (1/n) Σ_i x xᵀ`, by power iteration
/// on the explicitly summed d×d matrix.
pub fn weighted_second_moment_norm(coll: &BatchCollection, beta: &WeightVector) -> f64 {
    let d = coll.dim();
    let total = beta.total();
    let mut m = vec![0.0; d * d];
    for (b, &wb) in beta.as_slice().iter().enumerate() {
        if wb > 0.0 {
            axpy(wb / total, coll.second_moment(b), &mut m);
        }
    }
    let mut v: Vec<f64> = (0..d).map(|j| 1.0 + 0.1 * j as f64).collect();
    normalize(&mut v);
    let mut lambda = 0.0;
    let mut next = vec![0.0; d];
    for _ in 0..200 {
        for (r, out) in next.iter_mut().enumerate() {
            *out = dot(&m[r * d..(r + 1) * d], &v);
        }
        let len = normalize(&mut next);
        if len == 0.0 {
            return 0.0;
        }
        std::mem::swap(&mut v, &mut next);
        if (len - lambda).abs() <= 1e-10 * len {
            lambda = len;
            break;
        }
        lambda = len;
    }
    lambda
}

/// Gradient descent to `‖E_β[∇f^b(w, κ)]‖ ≤ tol`, warm-started at `w_init`.
///
/// Returns `converged = false` with the last iterate if the iteration cap is
/// hit or the line search can no longer make progress in floating point.
pub fn solve_stationary(
    coll: &BatchCollection,
    beta: &WeightVector,
    kappa: f64,
    tol: f64,
    w_init: &[f64],
) -> Result<SolverReport> {
    descend(coll, beta, kappa, tol, w_init, MAX_ITERATIONS, None)
}

pub(crate) fn descend(
    coll: &BatchCollection,
    beta: &WeightVector,
    kappa: f64,
    tol: f64,
    w_init: &[f64],
    max_iter: usize,
    mut trace: Option<&mut Vec<f64>>,
) -> Result<SolverReport> {
    check_kappa(kappa)?;
    if !(tol > 0.0) {
        return Err(Error::Argument(format!("tolerance must be positive, got {tol}")));
    }
    if beta.len() != coll.len() {
        return Err(Error::Argument(format!(
            "{} weights for {} batches",
            beta.len(),
            coll.len()
        )));
    }
    if w_init.len() != coll.dim() {
        return Err(Error::Argument(format!(
            "start point has dimension {}, data has dimension {}",
            w_init.len(),
            coll.dim()
        )));
    }
    if beta.total() <= 0.0 {
        return Err(Error::DegenerateWeights);
    }

    let lipschitz = weighted_second_moment_norm(coll, beta);
    let base_step = if lipschitz > 0.0 { 1.0 / lipschitz } else { 1.0 };

    let mut w = w_init.to_vec();
    let (mut obj, mut grad) = objective_and_grad(coll, beta, &w, kappa);
    let mut trial = vec![0.0; w.len()];
    if let Some(t) = trace.as_deref_mut() {
        t.push(obj);
    }

    let mut iterations = 0;
    let mut first_step = base_step;
    loop {
        let grad_norm = norm(&grad);
        if grad_norm <= tol {
            return Ok(SolverReport { w, grad_norm, objective: obj, iterations, converged: true });
        }
        if iterations >= max_iter {
            return Ok(SolverReport { w, grad_norm, objective: obj, iterations, converged: false });
        }
        iterations += 1;

        let g2 = grad_norm * grad_norm;
        let mut step = first_step;
        let accepted = loop {
            trial.copy_from_slice(&w);
            axpy(-step, &grad, &mut trial);
            let (t_obj, t_grad) = objective_and_grad(coll, beta, &trial, kappa);
            if t_obj <= obj - SUFFICIENT_DECREASE * step * g2 {
                break Some((t_obj, t_grad));
            }
            step *= ARMIJO_SHRINK;
            if step < MIN_STEP * base_step {
                break None;
            }
        };
        match accepted {
            Some((t_obj, t_grad)) => {
                first_step = barzilai_borwein(&w, &trial, &grad, &t_grad)
                    .map_or(base_step, |bb| bb.clamp(base_step, MAX_STEP_RATIO * base_step));
                std::mem::swap(&mut w, &mut trial);
                obj = t_obj;
                grad = t_grad;
                if let Some(t) = trace.as_deref_mut() {
                    t.push(obj);
                }
            }
            None => {
                return Ok(SolverReport { w, grad_norm, objective: obj, iterations, converged: false });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::batch_clipped_grad;
    use crate::stats::weighted_mean;
    use crate::types::Batch;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_collection(m: usize, n: usize, d: usize, noise: f64, seed: u64) -> (BatchCollection, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_star: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let batches = (0..m)
            .map(|_| {
                let mut xs = Vec::with_capacity(n * d);
                let mut ys = Vec::with_capacity(n);
                for _ in 0..n {
                    let x: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                    let e: f64 = rng.sample(StandardNormal);
                    ys.push(dot(&x, &w_star) + noise * e);
                    xs.extend(x);
                }
                Batch::new(d, xs, ys).unwrap()
            })
            .collect();
        (BatchCollection::new(batches).unwrap(), w_star)
    }

    /// Weighted least squares by the normal equations.
    fn wls_oracle(coll: &BatchCollection, beta: &WeightVector) -> Vec<f64> {
        let d = coll.dim();
        let mut a = DMatrix::<f64>::zeros(d, d);
        let mut rhs = DVector::<f64>::zeros(d);
        for (batch, &wb) in coll.batches().iter().zip(beta.as_slice()) {
            for s in batch.samples() {
                let x = DVector::from_column_slice(s.x);
                a += wb * &x * x.transpose();
                rhs += wb * s.y * &x;
            }
        }
        a.cholesky().unwrap().solve(&rhs).iter().copied().collect()
    }

    #[test]
    fn interpolates_single_sample() {
        let b = Batch::from_rows(vec![(vec![1.0], 3.0)]).unwrap();
        let coll = BatchCollection::new(vec![b]).unwrap();
        let beta = WeightVector::ones(1).unwrap();
        let r = solve_stationary(&coll, &beta, 100.0, 1e-8, &[0.0]).unwrap();
        assert!(r.converged);
        assert!((r.w[0] - 3.0).abs() < 1e-7);
    }

    #[test]
    fn noiseless_recovers_truth() {
        let (coll, w_star) = random_collection(10, 20, 4, 0.0, 3);
        let beta = WeightVector::ones(10).unwrap();
        let r = solve_stationary(&coll, &beta, 1e6, 1e-10, &[0.0; 4]).unwrap();
        assert!(r.converged);
        for (a, b) in r.w.iter().zip(&w_star) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn huge_kappa_matches_weighted_least_squares() {
        let (coll, _) = random_collection(30, 15, 5, 0.5, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let beta = WeightVector::new((0..30).map(|_| rng.random::<f64>()).collect()).unwrap();
        let r = solve_stationary(&coll, &beta, 1e6, 1e-10, &[0.0; 5]).unwrap();
        let oracle = wls_oracle(&coll, &beta);
        assert!(crate::linalg::distance(&r.w, &oracle) < 1e-5);
    }

    #[test]
    fn reported_gradient_norm_is_exact() {
        let (coll, _) = random_collection(12, 10, 3, 1.0, 5);
        let beta = WeightVector::new((0..12).map(|b| if b % 3 == 0 { 0.0 } else { 0.5 }).collect()).unwrap();
        let r = solve_stationary(&coll, &beta, 0.7, 1e-6, &[0.0; 3]).unwrap();
        assert!(r.converged);
        let grads: Vec<Vec<f64>> = coll
            .batches()
            .iter()
            .map(|b| batch_clipped_grad(b, &r.w, 0.7).unwrap())
            .collect();
        let g = weighted_mean(&grads, &beta).unwrap();
        assert!((norm(&g) - r.grad_norm).abs() < 1e-12);
        assert!(r.grad_norm <= 1e-6);
    }

    #[test]
    fn objective_never_increases() {
        let (coll, _) = random_collection(8, 10, 3, 2.0, 21);
        let beta = WeightVector::ones(8).unwrap();
        let mut trace = Vec::new();
        let r = descend(&coll, &beta, 0.3, 1e-9, &[5.0, -5.0, 5.0], MAX_ITERATIONS, Some(&mut trace)).unwrap();
        assert!(r.converged);
        assert!(trace.windows(2).all(|p| p[1] <= p[0]));
    }

    #[test]
    fn budget_exhaustion_is_reported() {
        let (coll, _) = random_collection(4, 10, 3, 1.0, 2);
        let beta = WeightVector::ones(4).unwrap();
        let r = descend(&coll, &beta, 0.01, 1e-14, &[10.0; 3], 3, None).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 3);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let (coll, _) = random_collection(2, 3, 2, 1.0, 2);
        let zero = WeightVector::new(vec![0.0, 0.0]).unwrap();
        let ones = WeightVector::ones(2).unwrap();
        assert_eq!(
            solve_stationary(&coll, &zero, 1.0, 1e-6, &[0.0; 2]),
            Err(Error::DegenerateWeights)
        );
        assert!(solve_stationary(&coll, &ones, 1.0, 0.0, &[0.0; 2]).is_err());
        assert!(solve_stationary(&coll, &ones, 0.0, 1e-3, &[0.0; 2]).is_err());
        assert!(solve_stationary(&coll, &ones, 1.0, 1e-3, &[0.0; 3]).is_err());
    }
}
