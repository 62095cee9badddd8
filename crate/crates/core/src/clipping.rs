//! Joint selection of the clipping parameter and stationary point for one
//! soft cluster.
//!
//! Starting from `κ = ∞` (plain squared loss), each round computes an
//! approximate stationary point `w_κ` and proposes
//! `κ_new = max(a₁ √E_β[f^b(w_κ, κ)], a₂σ)`. The loop stops as soon as the
//! proposal fails to halve `κ`. Each solve is warm-started from the previous
//! `w`, so the loss sequence is monotone and the lower bracket
//! `κ ≥ max(a₁√E_β[f], a₂σ)` holds exactly at exit.

use crate::error::{Error, Result};
use crate::loss::{batch_abs_residual, batch_clipped_loss};
use crate::solver::{solve_stationary, SolverReport};
use crate::stats::weighted_scalar_mean;
use crate::types::{AlgoConfig, BatchCollection, WeightVector};

/// Relative slack used when checking brackets computed in floating point.
const BRACKET_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct ClipResult {
    pub kappa: f64,
    pub w: Vec<f64>,
    /// Solver report for the returned `(κ, w)`.
    pub report: SolverReport,
    pub loop_iterations: usize,
    /// False if any inner solve stopped before reaching its tolerance.
    pub all_converged: bool,
}

/// `(a₁, a₂)` with `a₁ = 256 C √2 / 3` and
/// `a₂ = a₁/4 + 2 max{2(8 C_p C)^{1/p}, 2(8 C_p √(nα) / log(2/α))^{1/(p−1)}}`.
pub fn compute_a_constants(cfg: &AlgoConfig, n: usize) -> (f64, f64) {
    let c = cfg.hypercontractivity;
    let cp = cfg.noise_hypercontractivity;
    let p = cfg.noise_moment;
    let a1 = 256.0 * c * std::f64::consts::SQRT_2 / 3.0;
    let moment_term = 2.0 * (8.0 * cp * c).powf(1.0 / p);
    let batch_term =
        2.0 * (8.0 * cp * (n as f64 * cfg.alpha).sqrt() / cfg.log_factor()).powf(1.0 / (p - 1.0));
    let a2 = a1 / 4.0 + 2.0 * moment_term.max(batch_term);
    (a1, a2)
}

/// Stationarity tolerance `scale · log(2/α) σ / (8 √(nα))`, floored so that a
/// noiseless configuration still has a reachable target.
pub fn stationary_tolerance(cfg: &AlgoConfig, n: usize) -> f64 {
    let base = cfg.log_factor() * cfg.sigma / (8.0 * (n as f64 * cfg.alpha).sqrt());
    (cfg.stationary_tol_scale * base).max(1e-10)
}

/// Lower floor for `κ`; equals `a₂σ` unless `σ = 0`.
fn kappa_floor(a2: f64, sigma: f64, max_abs_y: f64) -> f64 {
    (a2 * sigma).max(1e-9 * max_abs_y.max(1.0))
}

/// `⌈log₂(a₁ max|y| / (a₂σ))⌉₊ + 2`: the loop-length guarantee.
pub fn iteration_bound(a1: f64, a2: f64, sigma: f64, max_abs_y: f64) -> usize {
    let floor = kappa_floor(a2, sigma, max_abs_y);
    let ratio = a1 * max_abs_y / floor;
    let log = if ratio > 1.0 { ratio.log2().ceil() } else { 0.0 };
    log as usize + 2
}

pub fn find_clipping_parameter(
    coll: &BatchCollection,
    beta: &WeightVector,
    cfg: &AlgoConfig,
) -> Result<ClipResult> {
    let w0 = vec![0.0; coll.dim()];
    find_clipping_parameter_from(coll, beta, cfg, &w0)
}

/// As [`find_clipping_parameter`], with the first solve started at `w_init`.
pub fn find_clipping_parameter_from(
    coll: &BatchCollection,
    beta: &WeightVector,
    cfg: &AlgoConfig,
    w_init: &[f64],
) -> Result<ClipResult> {
    if beta.total() <= 0.0 {
        return Err(Error::DegenerateWeights);
    }
    let n = coll.batch_size();
    let (a1, a2) = compute_a_constants(cfg, n);
    let tol = stationary_tolerance(cfg, n);
    let max_abs_y = coll.max_abs_response();
    let floor = kappa_floor(a2, cfg.sigma, max_abs_y);
    let bound = iteration_bound(a1, a2, cfg.sigma, max_abs_y);

    let mut kappa = f64::INFINITY;
    let mut w = w_init.to_vec();
    let mut all_converged = true;
    let mut iterations = 0;
    loop {
        iterations += 1;
        if iterations > bound + 5 {
            return Err(Error::Internal(format!(
                "clipping loop ran {iterations} rounds, bound is {bound}"
            )));
        }
        let report = solve_stationary(coll, beta, kappa, tol, &w)?;
        all_converged &= report.converged;
        w.clone_from(&report.w);
        let proposal = (a1 * report.objective.max(0.0).sqrt()).max(floor);
        if proposal >= kappa / 2.0 {
            return Ok(ClipResult { kappa, w, report, loop_iterations: iterations, all_converged });
        }
        kappa = proposal;
    }
}

/// Recomputes `E_β[f^b(w, κ)]` and `E_β[v^b]` from scratch and lists every
/// violated bracket of the clipping guarantee. Empty means all hold.
pub fn bracket_violations(
    coll: &BatchCollection,
    beta: &WeightVector,
    cfg: &AlgoConfig,
    result: &ClipResult,
) -> Result<Vec<String>> {
    let (a1, a2) = compute_a_constants(cfg, coll.batch_size());
    let kappa = result.kappa;
    let losses = coll
        .batches()
        .iter()
        .map(|b| batch_clipped_loss(b, &result.w, kappa))
        .collect::<Result<Vec<_>>>()?;
    let abs_res = coll
        .batches()
        .iter()
        .map(|b| batch_abs_residual(b, &result.w))
        .collect::<Result<Vec<_>>>()?;
    let mean_loss = weighted_scalar_mean(&losses, beta)?;
    let mean_v = weighted_scalar_mean(&abs_res, beta)?;
    let floor = kappa_floor(a2, cfg.sigma, coll.max_abs_response());

    let mut out = Vec::new();
    let mut check = |ok: bool, msg: String| {
        if !ok {
            out.push(msg);
        }
    };
    let le = |lhs: f64, rhs: f64| lhs <= rhs * (1.0 + BRACKET_SLACK) + f64::MIN_POSITIVE;

    let item2 = (a1 * mean_loss.sqrt()).max(floor);
    check(le(item2, kappa), format!("kappa {kappa} below max(a1 sqrt(loss), a2 sigma) = {item2}"));
    check(le(kappa, 2.0 * item2), format!("kappa {kappa} above 2 max(a1 sqrt(loss), a2 sigma) = {}", 2.0 * item2));

    let lower3 = (0.5 * a1 * mean_v).max(floor);
    let upper3 = (4.0 * a1 * a1 * mean_v).max(floor);
    check(le(lower3, kappa), format!("kappa {kappa} below max(a1/2 E[v], a2 sigma) = {lower3}"));
    check(le(kappa, upper3), format!("kappa {kappa} above max(4 a1^2 E[v], a2 sigma) = {upper3}"));

    let bound = iteration_bound(a1, a2, cfg.sigma, coll.max_abs_response());
    check(
        result.loop_iterations <= bound,
        format!("{} loop rounds exceed bound {bound}", result.loop_iterations),
    );
    if result.report.converged {
        let tol = stationary_tolerance(cfg, coll.batch_size());
        check(
            result.report.grad_norm <= tol,
            format!("gradient norm {} above tolerance {tol}", result.report.grad_norm),
        );
    }
    Ok(out)
}
