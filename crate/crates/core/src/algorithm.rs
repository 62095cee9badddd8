//! The outer list-decoding loop.
//!
//! A worklist of soft clusters starts with the all-ones weight vector. Each
//! popped cluster gets a clipping parameter and stationary point; then two
//! per-batch scores are tested against their thresholds:
//!
//! * Type-1: mean absolute residuals `v^b` against `θ₁`;
//! * Type-2: clipped gradients projected on the top covariance direction,
//!   `ṽ^b`, against `θ₂`.
//!
//! A firing test sends the cluster through the multifilter and re-queues the
//! children heavy enough to matter. A cluster on which neither test fires is
//! emitted as a triplet `(β, κ, w)`.

use crate::clipping::{find_clipping_parameter, ClipResult};
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::loss::{batch_abs_residual, batch_clipped_grad};
use crate::multifilter::multifilter;
use crate::stats::{cov_top_eig, weighted_scalar_mean, weighted_upper_quantile, weighted_variance};
use crate::types::{AlgoConfig, Batch, BatchCollection, FilterBranch, Triplet, WeightVector};

/// `θ₁ = (c₂/n)(σ² + (8√C θ₀/7 + σ/7)²)`.
pub fn theta1(theta0: f64, cfg: &AlgoConfig, n: usize) -> f64 {
    let sigma = cfg.sigma;
    let inner = 8.0 * cfg.hypercontractivity.sqrt() * theta0 / 7.0 + sigma / 7.0;
    cfg.c2 / n as f64 * (sigma * sigma + inner * inner)
}

/// `θ₂ = (c₄/n)(σ² + 16C²(E_β[v] + σ)²)`.
pub fn theta2(mean_v: f64, cfg: &AlgoConfig, n: usize) -> f64 {
    let sigma = cfg.sigma;
    let c = cfg.hypercontractivity;
    let shift = mean_v + sigma;
    cfg.c4 / n as f64 * (sigma * sigma + 16.0 * c * c * shift * shift)
}

/// What happened to a cluster popped from the worklist.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    /// Residual scores were filtered.
    Type1(FilterBranch),
    /// Projected gradient scores were filtered.
    Type2(FilterBranch),
    /// Neither test fired; the cluster joined the output list.
    Accepted,
    /// A subroutine failed; the cluster was dropped.
    Rejected,
}

/// One multifilter output.
#[derive(Debug, Clone, PartialEq)]
pub struct ChildRecord {
    pub weight: f64,
    pub support: usize,
    pub subset_of_parent: bool,
    /// False if pruned for weighing less than `α|B|/2`.
    pub kept: bool,
}

/// Quantities computed for one popped cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub cluster_weight: f64,
    pub support: usize,
    pub kappa: f64,
    pub clip_rounds: usize,
    pub solver_converged: bool,
    pub theta0: f64,
    pub theta1: f64,
    pub theta2: f64,
    pub var_v: f64,
    pub var_v_tilde: f64,
    pub top_eigenvalue: f64,
    pub action: Action,
    /// Every multifilter output, kept or pruned.
    pub children: Vec<ChildRecord>,
    pub error: Option<String>,
}

impl IterationRecord {
    fn empty(beta: &WeightVector) -> Self {
        Self {
            cluster_weight: beta.total(),
            support: beta.support_size(),
            kappa: f64::NAN,
            clip_rounds: 0,
            solver_converged: false,
            theta0: f64::NAN,
            theta1: f64::NAN,
            theta2: f64::NAN,
            var_v: f64::NAN,
            var_v_tilde: f64::NAN,
            top_eigenvalue: f64::NAN,
            action: Action::Rejected,
            children: Vec::new(),
            error: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub list: Vec<Triplet>,
    pub filter_calls: usize,
    pub rejected_clusters: usize,
    pub diagnostics: Vec<IterationRecord>,
    /// False if the filter budget ran out with clusters still queued.
    pub complete: bool,
}

/// Per-cluster scores.
struct Scores {
    clip: ClipResult,
    v: Vec<f64>,
    v_tilde: Vec<f64>,
    top_eigenvalue: f64,
}

fn scores(coll: &BatchCollection, beta: &WeightVector, cfg: &AlgoConfig, seed: u64) -> Result<Scores> {
    let clip = find_clipping_parameter(coll, beta, cfg)?;
    let d = coll.dim();
    let grads = coll
        .batches()
        .iter()
        .zip(beta.as_slice())
        .map(|(b, &wb)| {
            if wb > 0.0 {
                batch_clipped_grad(b, &clip.w, clip.kappa)
            } else {
                Ok(vec![0.0; d])
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let eig = cov_top_eig(&grads, beta, cfg.power_iter_tol, cfg.power_iter_max, seed)?;
    let v = coll
        .batches()
        .iter()
        .map(|b| batch_abs_residual(b, &clip.w))
        .collect::<Result<Vec<_>>>()?;
    let v_tilde = grads.iter().map(|g| dot(g, &eig.u)).collect();
    Ok(Scores { clip, v, v_tilde, top_eigenvalue: eig.lambda })
}

fn iteration_seed(base: u64, iteration: usize) -> u64 {
    base ^ (iteration as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Runs the list-decoding loop on `coll`.
///
/// Subroutine failures on a cluster drop that cluster and are recorded in its
/// diagnostics; they never abort the run. Running out of filter budget stops
/// the loop with `complete = false`.
pub fn run(coll: &BatchCollection, cfg: &AlgoConfig) -> Result<RunResult> {
    cfg.validate()?;
    let m = coll.len();
    let n = coll.batch_size();
    let budget = cfg.filter_budget(m);
    let keep_weight = cfg.alpha * m as f64 / 2.0;
    let log = cfg.log_factor();
    let factor = cfg.c3 * log * log;

    let mut stack = vec![WeightVector::ones(m)?];
    let mut result = RunResult {
        list: Vec::new(),
        filter_calls: 0,
        rejected_clusters: 0,
        diagnostics: Vec::new(),
        complete: true,
    };

    while let Some(beta) = stack.pop() {
        let mut record = IterationRecord::empty(&beta);
        let seed = iteration_seed(cfg.rng_seed, result.diagnostics.len());
        let s = match scores(coll, &beta, cfg, seed) {
            Ok(s) => s,
            Err(e) => {
                record.error = Some(e.to_string());
                result.rejected_clusters += 1;
                result.diagnostics.push(record);
                continue;
            }
        };
        record.kappa = s.clip.kappa;
        record.clip_rounds = s.clip.loop_iterations;
        record.solver_converged = s.clip.all_converged;
        record.top_eigenvalue = s.top_eigenvalue;

        let thresholds = (|| -> Result<_> {
            let theta0 = weighted_upper_quantile(&s.v, &beta, cfg.alpha * m as f64 / 4.0)?;
            let mean_v = weighted_scalar_mean(&s.v, &beta)?;
            let var_v = weighted_variance(&s.v, &beta)?;
            let var_v_tilde = weighted_variance(&s.v_tilde, &beta)?;
            Ok((theta0, theta1(theta0, cfg, n), theta2(mean_v, cfg, n), var_v, var_v_tilde))
        })();
        let (theta0, t1, t2, var_v, var_v_tilde) = match thresholds {
            Ok(t) => t,
            Err(e) => {
                record.error = Some(e.to_string());
                result.rejected_clusters += 1;
                result.diagnostics.push(record);
                continue;
            }
        };
        record.theta0 = theta0;
        record.theta1 = t1;
        record.theta2 = t2;
        record.var_v = var_v;
        record.var_v_tilde = var_v_tilde;

        let filter = if var_v > factor * t1 {
            Some((&s.v, t1, Action::Type1 as fn(FilterBranch) -> Action))
        } else if var_v_tilde > factor * t2 {
            Some((&s.v_tilde, t2, Action::Type2 as fn(FilterBranch) -> Action))
        } else {
            None
        };

        match filter {
            None => {
                record.action = Action::Accepted;
                result.list.push(Triplet { beta, kappa: s.clip.kappa, w: s.clip.w });
            }
            Some(_) if result.filter_calls >= budget => {
                record.error = Some(format!("filter budget of {budget} calls exhausted"));
                result.complete = false;
                result.diagnostics.push(record);
                break;
            }
            Some((z, theta, tag)) => {
                result.filter_calls += 1;
                match multifilter(&beta, z, theta, cfg.alpha, cfg.c3) {
                    Ok(outcome) => {
                        record.action = tag(outcome.branch);
                        let mut kept = Vec::new();
                        for child in outcome.new_weights {
                            let weight = child.total();
                            let keep = weight >= keep_weight;
                            record.children.push(ChildRecord {
                                weight,
                                support: child.support_size(),
                                subset_of_parent: child.support().iter().all(|&b| beta.get(b) > 0.0),
                                kept: keep,
                            });
                            if keep {
                                kept.push(child);
                            }
                        }
                        // reversed so the first child is processed first
                        stack.extend(kept.into_iter().rev());
                    }
                    Err(e) => {
                        record.error = Some(e.to_string());
                        result.rejected_clusters += 1;
                    }
                }
            }
        }
        result.diagnostics.push(record);
    }
    Ok(result)
}

/// Index of the triplet whose `w` has the smallest mean squared residual on
/// `holdout`; ties go to the lowest index.
pub fn select_by_holdout(list: &[Triplet], holdout: &Batch) -> Result<usize> {
    if list.is_empty() {
        return Err(Error::Argument("cannot select from an empty list".into()));
    }
    let mut best = (0, f64::INFINITY);
    for (i, t) in list.iter().enumerate() {
        if t.w.len() != holdout.dim() {
            return Err(Error::Argument(format!(
                "candidate {i} has dimension {}, hold-out batch has {}",
                t.w.len(),
                holdout.dim()
            )));
        }
        let mse = holdout.samples().map(|s| s.residual(&t.w).powi(2)).sum::<f64>() / holdout.len() as f64;
        if mse < best.1 {
            best = (i, mse);
        }
    }
    Ok(best.0)
}
