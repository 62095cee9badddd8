//! Experiment plumbing: scenario → generator → algorithm → metrics.
//!
//! A [`Scenario`] is a generator template whose regressors and adversary
//! parameters may be left to be drawn per trial. Every trial derives its
//! seeds from `(base seed, trial index)` alone, so per-trial rows do not
//! depend on scheduling and trials can run in parallel.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::algorithm::{run, select_by_holdout, RunResult};
use crate::clipping::bracket_violations;
use crate::error::{Error, Result};
use crate::linalg::{distance, normalize};
use crate::synth::{generate, holdout_batches, planted_regressors, Adversary, CovariateModel, GeneratorSpec, NoiseModel};
use crate::types::{AlgoConfig, BatchCollection, Triplet};

/// Planted regressors: given explicitly or drawn per trial.
#[derive(Debug, Clone, PartialEq)]
pub enum Regressors {
    Explicit(Vec<Vec<f64>>),
    /// `k` random unit vectors with pairwise distance at least `separation`.
    Planted { k: usize, separation: f64 },
}

/// Adversary template; vectors left as `None` are drawn per trial.
#[derive(Debug, Clone, PartialEq)]
pub enum AdversarySpec {
    None,
    /// Defaults to `w*_0 + distance · u` for a random unit `u`.
    FixedWrongModel { w_adv: Option<Vec<f64>>, distance: f64 },
    Mirror { scale: f64 },
    /// Defaults to `x0 = (1, …, 1)`.
    PointMass { x0: Option<Vec<f64>>, y0: f64 },
    /// Defaults to `shift = distance · u` for a random unit `u`.
    GradientAttack { shift: Option<Vec<f64>>, distance: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub d: usize,
    pub n: usize,
    pub m: usize,
    pub genuine_fraction: f64,
    pub regressors: Regressors,
    pub covariates: CovariateModel,
    pub noise: NoiseModel,
    pub sigma: f64,
    pub adversary: AdversarySpec,
    /// Fresh hold-out batches per component for the identification metric.
    pub holdout_per_component: usize,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            d: 8,
            n: 100,
            m: 200,
            genuine_fraction: 1.0,
            regressors: Regressors::Planted { k: 4, separation: 1.0 },
            covariates: CovariateModel::IsotropicGaussianClamped { c1: 4.0 },
            noise: NoiseModel::Gaussian,
            sigma: 0.2,
            adversary: AdversarySpec::None,
            holdout_per_component: 5,
        }
    }
}

const PLANT_SALT: u64 = 0x05EE_D0FA_11CE;
const ADVERSARY_SALT: u64 = 0xBAD_5EED;
const ALGO_SALT: u64 = 0xA160_5EED;

/// SplitMix64 finalizer of `base + index`.
pub fn trial_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn random_unit(d: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let mut u: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        if normalize(&mut u) > 0.0 {
            return u;
        }
    }
}

impl Scenario {
    /// The generator spec of the trial seeded by `seed`.
    pub fn instantiate(&self, seed: u64) -> Result<GeneratorSpec> {
        let w_stars = match &self.regressors {
            Regressors::Explicit(ws) => ws.clone(),
            Regressors::Planted { k, separation } => planted_regressors(*k, self.d, *separation, seed ^ PLANT_SALT)?,
        };
        let first = w_stars
            .first()
            .cloned()
            .ok_or_else(|| Error::Argument("at least one regressor is required".into()))?;
        if first.len() != self.d {
            return Err(Error::Argument(format!("regressors must have dimension {}", self.d)));
        }
        let direction = || random_unit(self.d, seed ^ ADVERSARY_SALT);
        let adversary = match &self.adversary {
            AdversarySpec::None => Adversary::None,
            AdversarySpec::FixedWrongModel { w_adv, distance } => Adversary::FixedWrongModel {
                w_adv: w_adv.clone().unwrap_or_else(|| {
                    first.iter().zip(direction()).map(|(w, u)| w + distance * u).collect()
                }),
            },
            AdversarySpec::Mirror { scale } => Adversary::Mirror { scale: *scale },
            AdversarySpec::PointMass { x0, y0 } => Adversary::PointMass {
                x0: x0.clone().unwrap_or_else(|| vec![1.0; self.d]),
                y0: *y0,
            },
            AdversarySpec::GradientAttack { shift, distance } => Adversary::GradientAttack {
                shift: shift.clone().unwrap_or_else(|| direction().iter().map(|u| distance * u).collect()),
            },
        };
        let spec = GeneratorSpec {
            d: self.d,
            n: self.n,
            m: self.m,
            alpha: self.genuine_fraction,
            w_stars,
            covariates: self.covariates.clone(),
            noise: self.noise,
            sigma: self.sigma,
            adversary,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// `min_{w ∈ list} ‖w − w*‖`; infinite for an empty list.
pub fn min_list_error(list: &[Triplet], w_star: &[f64]) -> f64 {
    list.iter().map(|t| distance(&t.w, w_star)).fold(f64::INFINITY, f64::min)
}

/// Index of the list element closest to `w_star`; ties go to the lowest index.
pub fn nearest_index(list: &[Triplet], w_star: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, t) in list.iter().enumerate() {
        let dist = distance(&t.w, w_star);
        if best.is_none_or(|(_, b)| dist < b) {
            best = Some((i, dist));
        }
    }
    best.map(|(i, _)| i)
}

fn nearest_component(w: &[f64], w_stars: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (j, ws) in w_stars.iter().enumerate() {
        let dist = distance(w, ws);
        if dist < best.1 {
            best = (j, dist);
        }
    }
    best.0
}

/// Per-trial results.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub trial: usize,
    pub seed: u64,
    /// `max_j min_{w ∈ list} ‖w − w*_j‖`.
    #[serde(serialize_with = "ser::f64")]
    pub min_list_error: f64,
    pub list_size: usize,
    #[serde(serialize_with = "ser::f64_vec")]
    pub per_component_error: Vec<f64>,
    /// Fraction of hold-out batches whose selected list element lies nearest
    /// to the batch's own component among all planted regressors.
    #[serde(serialize_with = "ser::f64")]
    pub holdout_accuracy: f64,
    /// Fraction of hold-out batches assigned to exactly the list element
    /// nearest their component.
    #[serde(serialize_with = "ser::f64")]
    pub holdout_nearest: f64,
    pub filter_calls: usize,
    pub rejected_clusters: usize,
    pub complete: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_ms: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Metrics {
    fn failed(trial: usize, seed: u64, err: Error) -> Self {
        Self {
            trial,
            seed,
            min_list_error: f64::INFINITY,
            list_size: 0,
            per_component_error: Vec::new(),
            holdout_accuracy: 0.0,
            holdout_nearest: 0.0,
            filter_calls: 0,
            rejected_clusters: 0,
            complete: false,
            wall_time_ms: None,
            error: Some(err.to_string()),
        }
    }
}

/// Metrics of one finished run against the ground truth of `spec`.
pub fn evaluate(spec: &GeneratorSpec, result: &RunResult, holdout_per_component: usize, salt: u64) -> Result<(Vec<f64>, f64, f64)> {
    let per_component: Vec<f64> = spec.w_stars.iter().map(|w| min_list_error(&result.list, w)).collect();
    if result.list.is_empty() || holdout_per_component == 0 {
        return Ok((per_component, 0.0, 0.0));
    }
    let mut identified = 0usize;
    let mut exact = 0usize;
    let mut total = 0usize;
    for (j, w_star) in spec.w_stars.iter().enumerate() {
        let nearest = nearest_index(&result.list, w_star);
        for batch in holdout_batches(spec, j, holdout_per_component, salt)? {
            let chosen = select_by_holdout(&result.list, &batch)?;
            total += 1;
            identified += usize::from(nearest_component(&result.list[chosen].w, &spec.w_stars) == j);
            exact += usize::from(Some(chosen) == nearest);
        }
    }
    Ok((per_component, identified as f64 / total as f64, exact as f64 / total as f64))
}

/// Generates, runs and scores trial `trial` of an experiment.
pub fn run_trial(scenario: &Scenario, cfg: &AlgoConfig, base_seed: u64, trial: usize, timing: bool) -> Metrics {
    let seed = trial_seed(base_seed, trial as u64);
    let attempt = || -> Result<Metrics> {
        let spec = scenario.instantiate(seed)?;
        let data = generate(&spec)?;
        let algo = AlgoConfig { rng_seed: seed ^ ALGO_SALT, ..cfg.clone() };
        let start = Instant::now();
        let result = run(&data.coll, &algo)?;
        let elapsed = start.elapsed().as_millis() as u64;
        let (per_component, accuracy, nearest) = evaluate(&spec, &result, scenario.holdout_per_component, seed)?;
        Ok(Metrics {
            trial,
            seed,
            min_list_error: per_component.iter().copied().fold(0.0, f64::max),
            list_size: result.list.len(),
            per_component_error: per_component,
            holdout_accuracy: accuracy,
            holdout_nearest: nearest,
            filter_calls: result.filter_calls,
            rejected_clusters: result.rejected_clusters,
            complete: result.complete,
            wall_time_ms: timing.then_some(elapsed),
            error: None,
        })
    };
    attempt().unwrap_or_else(|e| Metrics::failed(trial, seed, e))
}

/// Mean, median and maximum of a per-trial quantity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    #[serde(serialize_with = "ser::f64")]
    pub mean: f64,
    #[serde(serialize_with = "ser::f64")]
    pub median: f64,
    #[serde(serialize_with = "ser::f64")]
    pub max: f64,
}

impl Summary {
    /// Median of an even count is the mean of the two middle values.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let k = sorted.len();
        let median = if k % 2 == 1 { sorted[k / 2] } else { 0.5 * (sorted[k / 2 - 1] + sorted[k / 2]) };
        Some(Self {
            mean: sorted.iter().sum::<f64>() / k as f64,
            median,
            max: sorted[k - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub completed_trials: usize,
    pub failed_trials: usize,
    pub min_list_error: Option<Summary>,
    pub list_size: Option<Summary>,
    pub holdout_accuracy: Option<Summary>,
    pub filter_calls: Option<Summary>,
}

impl Aggregate {
    pub fn of(rows: &[Metrics]) -> Self {
        let done: Vec<&Metrics> = rows.iter().filter(|r| r.error.is_none()).collect();
        let column = |f: fn(&Metrics) -> f64| Summary::of(&done.iter().map(|r| f(r)).collect::<Vec<_>>());
        Self {
            completed_trials: done.len(),
            failed_trials: rows.len() - done.len(),
            min_list_error: column(|r| r.min_list_error),
            list_size: column(|r| r.list_size as f64),
            holdout_accuracy: column(|r| r.holdout_accuracy),
            filter_calls: column(|r| r.filter_calls as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    /// Flat `key = value` rendering of the scenario and algorithm config.
    pub config: Vec<(String, String)>,
    pub per_trial: Vec<Metrics>,
    pub aggregate: Aggregate,
}

/// Runs `trials` independent trials in parallel; rows come back in trial order.
pub fn run_experiment(
    scenario: &Scenario,
    cfg: &AlgoConfig,
    trials: usize,
    base_seed: u64,
    timing: bool,
) -> Result<ExperimentReport> {
    if trials == 0 {
        return Err(Error::Argument("at least one trial is required".into()));
    }
    cfg.validate()?;
    let per_trial: Vec<Metrics> = (0..trials)
        .into_par_iter()
        .map(|t| run_trial(scenario, cfg, base_seed, t, timing))
        .collect();
    let aggregate = Aggregate::of(&per_trial);
    let config = crate::io::config_entries(scenario, cfg, Some(trials), Some(base_seed));
    Ok(ExperimentReport { config, per_trial, aggregate })
}

/// Checks the structural guarantees of a finished run and returns every
/// violation found.
pub fn check_invariants(coll: &BatchCollection, cfg: &AlgoConfig, result: &RunResult) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let m = coll.len();
    let bound = cfg.list_size_bound();
    if result.list.len() > bound {
        out.push(format!("list size {} exceeds bound {bound}", result.list.len()));
    }
    let budget = cfg.filter_budget(m);
    if result.filter_calls > budget {
        out.push(format!("{} filter calls exceed budget {budget}", result.filter_calls));
    }
    let keep_weight = cfg.alpha * m as f64 / 2.0;
    for (i, rec) in result.diagnostics.iter().enumerate() {
        if i > 0 && rec.cluster_weight < keep_weight {
            out.push(format!("cluster {i} of weight {} was queued below {keep_weight}", rec.cluster_weight));
        }
        if rec.children.is_empty() {
            continue;
        }
        let squares: f64 = rec.children.iter().map(|c| c.weight * c.weight).sum();
        if squares > rec.cluster_weight * rec.cluster_weight * (1.0 + 1e-12) {
            out.push(format!("cluster {i}: children squared weights {squares} exceed parent {}", rec.cluster_weight.powi(2)));
        }
        for c in &rec.children {
            if !c.subset_of_parent || c.support >= rec.support {
                out.push(format!("cluster {i}: child support {} is not a strict subset of {}", c.support, rec.support));
            }
        }
    }
    for (i, t) in result.list.iter().enumerate() {
        let clip = crate::clipping::find_clipping_parameter(coll, &t.beta, cfg)?;
        if clip.kappa != t.kappa || clip.w != t.w {
            out.push(format!("triplet {i} does not reproduce from its weights"));
        }
        for v in bracket_violations(coll, &t.beta, cfg, &clip)? {
            out.push(format!("triplet {i}: {v}"));
        }
    }
    Ok(out)
}

/// Serializers writing floats with 17 significant digits.
pub(crate) mod ser {
    use serde::Serializer;
    use serde_json::value::RawValue;

    pub fn number(v: f64) -> String {
        if v.is_finite() {
            format!("{v:.16e}")
        } else {
            "null".to_string()
        }
    }

    pub fn f64<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        let raw = RawValue::from_string(number(*v)).map_err(serde::ser::Error::custom)?;
        s.serialize_some(&raw)
    }

    pub fn f64_vec<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let body = v.iter().map(|x| number(*x)).collect::<Vec<_>>().join(",");
        let raw = RawValue::from_string(format!("[{body}]")).map_err(serde::ser::Error::custom)?;
        s.serialize_some(&raw)
    }
}
