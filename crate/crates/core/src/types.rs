//! Shared data model: samples, batches, soft-cluster weights, configuration,
//! and the triplets emitted by the main loop.

use std::sync::OnceLock;

use crate::error::{Error, Result};

/// Borrowed view of one regression sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample<'a> {
    pub x: &'a [f64],
    pub y: f64,
}

impl<'a> Sample<'a> {
    pub fn new(x: &'a [f64], y: f64) -> Self {
        Self { x, y }
    }

    /// Signed residual `w·x − y`.
    #[inline]
    pub fn residual(&self, w: &[f64]) -> f64 {
        crate::linalg::dot(w, self.x) - self.y
    }
}

/// `n` samples sharing dimension `d`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    d: usize,
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl Batch {
    /// Builds a batch from row-major covariates (`ys.len() * d` entries) and responses.
    pub fn new(d: usize, xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(Error::Argument("dimension must be positive".into()));
        }
        if ys.is_empty() {
            return Err(Error::Argument("a batch needs at least one sample".into()));
        }
        if xs.len() != ys.len() * d {
            return Err(Error::Argument(format!(
                "expected {} covariate entries for {} samples of dimension {d}, got {}",
                ys.len() * d,
                ys.len(),
                xs.len()
            )));
        }
        if xs.iter().chain(&ys).any(|v| !v.is_finite()) {
            return Err(Error::Argument("batch contains non-finite values".into()));
        }
        Ok(Self { d, xs, ys })
    }

    /// Builds a batch from `(x, y)` rows.
    pub fn from_rows<I>(rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (Vec<f64>, f64)>,
    {
        let mut d = None;
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (x, y) in rows {
            match d {
                None => d = Some(x.len()),
                Some(d) if d != x.len() => {
                    return Err(Error::Argument(format!(
                        "sample dimension {} differs from {d}",
                        x.len()
                    )))
                }
                _ => {}
            }
            xs.extend_from_slice(&x);
            ys.push(y);
        }
        Self::new(d.unwrap_or(0), xs, ys)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    pub fn sample(&self, i: usize) -> Sample<'_> {
        Sample {
            x: &self.xs[i * self.d..(i + 1) * self.d],
            y: self.ys[i],
        }
    }

    pub fn samples(&self) -> impl ExactSizeIterator<Item = Sample<'_>> + '_ {
        self.xs
            .chunks_exact(self.d)
            .zip(&self.ys)
            .map(|(x, &y)| Sample { x, y })
    }

    pub fn responses(&self) -> &[f64] {
        &self.ys
    }

    pub fn covariates(&self) -> &[f64] {
        &self.xs
    }

    pub fn max_abs_response(&self) -> f64 {
        self.ys.iter().fold(0.0, |acc, y| acc.max(y.abs()))
    }
}

/// The full input: `m` batches of exactly `n` samples in dimension `d`.
#[derive(Debug, Clone)]
pub struct BatchCollection {
    batches: Vec<Batch>,
    d: usize,
    n: usize,
    // per-batch (1/n) Σ x xᵀ, row-major d×d, computed on first use
    second_moments: OnceLock<Vec<Vec<f64>>>,
}

impl PartialEq for BatchCollection {
    fn eq(&self, other: &Self) -> bool {
        self.batches == other.batches
    }
}

impl BatchCollection {
    pub fn new(batches: Vec<Batch>) -> Result<Self> {
        let first = batches
            .first()
            .ok_or_else(|| Error::Argument("collection needs at least one batch".into()))?;
        let (d, n) = (first.dim(), first.len());
        for (idx, b) in batches.iter().enumerate() {
            if b.dim() != d || b.len() != n {
                return Err(Error::Argument(format!(
                    "batch {idx} has shape {}x{}, expected {n}x{d}",
                    b.len(),
                    b.dim()
                )));
            }
        }
        Ok(Self { batches, d, n, second_moments: OnceLock::new() })
    }

    pub fn batches(&self) -> &[Batch] {
        &self.batches
    }

    pub fn batch(&self, b: usize) -> &Batch {
        &self.batches[b]
    }

    /// Number of batches `m`.
    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Samples per batch `n`.
    pub fn batch_size(&self) -> usize {
        self.n
    }

    pub fn max_abs_response(&self) -> f64 {
        self.batches
            .iter()
            .fold(0.0, |acc, b| acc.max(b.max_abs_response()))
    }

    /// Per-batch covariate second moment `(1/n) Σ_i x_i x_iᵀ` (row-major).
    pub fn second_moment(&self, b: usize) -> &[f64] {
        &self.second_moments.get_or_init(|| {
            let d = self.d;
            self.batches
                .iter()
                .map(|batch| {
                    let mut g = vec![0.0; d * d];
                    for s in batch.samples() {
                        for (r, xr) in s.x.iter().enumerate() {
                            for (c, xc) in s.x.iter().enumerate().skip(r) {
                                g[r * d + c] += xr * xc;
                            }
                        }
                    }
                    let inv_n = 1.0 / batch.len() as f64;
                    for r in 0..d {
                        for c in r..d {
                            g[r * d + c] *= inv_n;
                            g[c * d + r] = g[r * d + c];
                        }
                    }
                    g
                })
                .collect()
        })[b]
    }
}

/// Per-batch membership weights in `[0, 1]`; a soft cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Argument("weight vector must be non-empty".into()));
        }
        if let Some((b, w)) = weights
            .iter()
            .enumerate()
            .find(|(_, w)| !(0.0..=1.0).contains(*w))
        {
            return Err(Error::Argument(format!("weight {w} of batch {b} outside [0, 1]")));
        }
        Ok(Self(weights))
    }

    /// All-ones weights over `m` batches.
    pub fn ones(m: usize) -> Result<Self> {
        Self::new(vec![1.0; m])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, b: usize) -> f64 {
        self.0[b]
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    /// Indices with strictly positive weight.
    pub fn support(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(b, _)| b)
            .collect()
    }

    pub fn support_size(&self) -> usize {
        self.0.iter().filter(|&&w| w > 0.0).count()
    }

    /// Copy keeping weights only where `keep(b)` holds.
    pub fn restricted(&self, mut keep: impl FnMut(usize) -> bool) -> Self {
        Self(
            self.0
                .iter()
                .enumerate()
                .map(|(b, &w)| if keep(b) { w } else { 0.0 })
                .collect(),
        )
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Sum of weights over `subset`, or over every batch when `subset` is `None`.
pub fn total_weight(beta: &WeightVector, subset: Option<&[usize]>) -> Result<f64> {
    match subset {
        None => Ok(beta.total()),
        Some(idx) => idx.iter().try_fold(0.0, |acc, &b| {
            if b >= beta.len() {
                Err(Error::Argument(format!(
                    "batch index {b} out of range for {} batches",
                    beta.len()
                )))
            } else {
                Ok(acc + beta.get(b))
            }
        }),
    }
}

/// Algorithm inputs and tuning constants.
#[derive(Debug, Clone, PartialEq)]
pub struct AlgoConfig {
    /// Fraction of genuine batches, in `(0, 1]`.
    pub alpha: f64,
    /// Noise scale.
    pub sigma: f64,
    /// L4-L2 hypercontractivity constant of the covariates.
    pub hypercontractivity: f64,
    /// Hypercontractivity constant of the noise moments.
    pub noise_hypercontractivity: f64,
    /// Noise moment order, at least 2.
    pub noise_moment: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    /// Multiplier on the default stationarity tolerance.
    pub stationary_tol_scale: f64,
    pub power_iter_tol: f64,
    pub power_iter_max: usize,
    /// `None` means `16 * ceil(m / alpha^2)`.
    pub max_filter_calls: Option<usize>,
    pub rng_seed: u64,
}

impl Default for AlgoConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            sigma: 1.0,
            hypercontractivity: 3.0,
            noise_hypercontractivity: 3.0,
            noise_moment: 4.0,
            c2: DEFAULT_C2,
            c3: DEFAULT_C3,
            c4: DEFAULT_C4,
            stationary_tol_scale: 1.0,
            power_iter_tol: 1e-6,
            power_iter_max: 1000,
            max_filter_calls: None,
            rng_seed: 0,
        }
    }
}

/// Default threshold constants. Only the products `c₂c₃ = 1/4` and
/// `c₃c₄ = 1/50` enter the firing tests; `c₃` alone scales the multifilter.
pub const DEFAULT_C2: f64 = 1.5625e-4;
pub const DEFAULT_C3: f64 = 1600.0;
pub const DEFAULT_C4: f64 = 1.25e-5;

impl AlgoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Argument(what.to_string()));
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha must lie in (0, 1]");
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be finite and non-negative");
        }
        if !(self.hypercontractivity >= 1.0 && self.hypercontractivity.is_finite()) {
            return bad("C must be finite and at least 1");
        }
        if !(self.noise_hypercontractivity >= 1.0 && self.noise_hypercontractivity.is_finite()) {
            return bad("C_p must be finite and at least 1");
        }
        if !(self.noise_moment >= 2.0) {
            return bad("p must be at least 2");
        }
        for (name, v) in [
            ("c2", self.c2),
            ("c3", self.c3),
            ("c4", self.c4),
            ("stationary_tol_scale", self.stationary_tol_scale),
            ("power_iter_tol", self.power_iter_tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Argument(format!("{name} must be positive and finite")));
            }
        }
        if self.power_iter_max == 0 {
            return bad("power_iter_max must be positive");
        }
        if self.max_filter_calls == Some(0) {
            return bad("max_filter_calls must be positive");
        }
        Ok(())
    }

    /// `log(2/alpha)`, the recurring logarithmic factor.
    pub fn log_factor(&self) -> f64 {
        (2.0 / self.alpha).ln()
    }

    pub fn filter_budget(&self, m: usize) -> usize {
        self.max_filter_calls
            .unwrap_or_else(|| 16 * (m as f64 / (self.alpha * self.alpha)).ceil() as usize)
    }

    /// Upper bound on the number of triplets a run may emit.
    pub fn list_size_bound(&self) -> usize {
        (4.0 / (self.alpha * self.alpha)).ceil() as usize
    }
}

/// A soft cluster together with its clipping parameter and regression estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub beta: WeightVector,
    pub kappa: f64,
    pub w: Vec<f64>,
}

/// Which branch of the multifilter produced an outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterBranch {
    Downweight,
    Split,
}

/// One downweighted cluster or two overlapping sub-clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub new_weights: Vec<WeightVector>,
    pub branch: FilterBranch,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_weight_full_and_subset() {
        let ones = WeightVector::ones(3).unwrap();
        assert_eq!(total_weight(&ones, None).unwrap(), 3.0);
        let beta = WeightVector::new(vec![0.5, 0.0, 1.0]).unwrap();
        assert_eq!(total_weight(&beta, Some(&[0, 2])).unwrap(), 1.5);
    }

    #[test]
    fn total_weight_rejects_bad_index() {
        let beta = WeightVector::ones(2).unwrap();
        assert!(matches!(
            total_weight(&beta, Some(&[0, 2])),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn empty_weights_rejected() {
        assert!(WeightVector::new(vec![]).is_err());
        assert!(WeightVector::new(vec![1.5]).is_err());
        assert!(WeightVector::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn collection_requires_uniform_shape() {
        let b1 = Batch::from_rows(vec![(vec![1.0, 0.0], 1.0)]).unwrap();
        let b2 = Batch::from_rows(vec![(vec![1.0], 1.0)]).unwrap();
        assert!(BatchCollection::new(vec![b1.clone(), b2]).is_err());
        assert!(BatchCollection::new(vec![]).is_err());
        let coll = BatchCollection::new(vec![b1.clone(), b1]).unwrap();
        assert_eq!((coll.len(), coll.batch_size(), coll.dim()), (2, 1, 2));
    }

    #[test]
    fn batch_rejects_non_finite() {
        assert!(Batch::new(1, vec![f64::INFINITY], vec![0.0]).is_err());
        assert!(Batch::new(2, vec![1.0], vec![0.0]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(AlgoConfig::default().validate().is_ok());
        let cfg = AlgoConfig { alpha: 0.0, ..AlgoConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = AlgoConfig { noise_moment: 1.5, ..AlgoConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = AlgoConfig { c3: -1.0, ..AlgoConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn budget_and_list_bound() {
        let cfg = AlgoConfig { alpha: 0.5, ..AlgoConfig::default() };
        assert_eq!(cfg.filter_budget(10), 16 * 40);
        assert_eq!(cfg.list_size_bound(), 16);
        let cfg = AlgoConfig { alpha: 0.3, ..AlgoConfig::default() };
        assert_eq!(cfg.list_size_bound(), 45);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn additive_and_monotone(ws in proptest::collection::vec(0.0f64..=1.0, 1..40), split in 0usize..40) {
                let beta = WeightVector::new(ws.clone()).unwrap();
                let m = ws.len();
                let cut = split.min(m);
                let left: Vec<usize> = (0..cut).collect();
                let right: Vec<usize> = (cut..m).collect();
                let l = total_weight(&beta, Some(&left)).unwrap();
                let r = total_weight(&beta, Some(&right)).unwrap();
                prop_assert!((l + r - beta.total()).abs() < 1e-12);
                prop_assert!(l <= beta.total() + 1e-12);
            }
        }
    }
}
