//! Seeded synthetic batch collections with known ground truth.
//!
//! Genuine batches draw every sample from one planted component,
//! `y = w*_j·x + noise`. The remaining batches follow an adversary strategy.
//! Each batch has its own ChaCha stream, so a batch depends only on the seed
//! and its position, never on how many batches were generated before it.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm};
use crate::types::{Batch, BatchCollection};

/// Covariate distributions. All have `‖Σ‖ = 1` and bounded norm.
#[derive(Debug, Clone, PartialEq)]
pub enum CovariateModel {
    /// `N(0, I)` redrawn until `‖x‖ ≤ c1 √d`.
    IsotropicGaussianClamped { c1: f64 },
    /// Uniform on `[−√3, √3]^d`, so `Σ = I`.
    BoundedUniform,
    /// `N(0, diag(λ))` with `λ` geometric from 1 down to `1 / condition_number`,
    /// redrawn until `‖x‖ ≤ c1 √d`.
    Anisotropic { condition_number: f64, c1: f64 },
}

/// Zero-mean noise distributions with variance `σ²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseModel {
    Gaussian,
    /// Uniform on `[−√3 σ, √3 σ]`.
    Bounded,
    /// Student-t with `dof > 2` degrees of freedom, rescaled to variance `σ²`.
    StudentT { dof: f64 },
}

/// Strategies for the non-genuine batches.
#[derive(Debug, Clone, PartialEq)]
pub enum Adversary {
    /// Every batch is genuine; requires `⌈αm⌉ = m`.
    None,
    /// Clean data from a different regressor.
    FixedWrongModel { w_adv: Vec<f64> },
    /// Covariates of a genuine batch with responses `−scale · y`.
    Mirror { scale: f64 },
    /// Every sample equal to `(x0, y0)`.
    PointMass { x0: Vec<f64>, y0: f64 },
    /// Covariates of a genuine batch of component 0 with responses from the
    /// shifted regressor `w*_0 + shift`, so only the gradients differ.
    GradientAttack { shift: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    pub d: usize,
    pub n: usize,
    pub m: usize,
    /// Fraction of genuine batches; `⌈αm⌉` are genuine.
    pub alpha: f64,
    pub w_stars: Vec<Vec<f64>>,
    pub covariates: CovariateModel,
    pub noise: NoiseModel,
    pub sigma: f64,
    pub adversary: Adversary,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            d: 4,
            n: 50,
            m: 40,
            alpha: 1.0,
            w_stars: vec![vec![1.0, 0.0, 0.0, 0.0]],
            covariates: CovariateModel::IsotropicGaussianClamped { c1: 4.0 },
            noise: NoiseModel::Gaussian,
            sigma: 0.1,
            adversary: Adversary::None,
            seed: 0,
        }
    }
}

/// A generated collection with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCollection {
    pub coll: BatchCollection,
    pub good_mask: Vec<bool>,
    /// Planted component of each genuine batch; `None` for adversarial ones.
    pub component_of: Vec<Option<usize>>,
    pub w_stars: Vec<Vec<f64>>,
}

const PERMUTATION_STREAM: u64 = u64::MAX;
const HOLDOUT_SALT: u64 = 0xD1B5_4A32_D192_ED03;

fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

impl CovariateModel {
    fn check(&self) -> Result<()> {
        match *self {
            CovariateModel::IsotropicGaussianClamped { c1 } if !(c1 >= 1.0) => {
                Err(Error::Argument(format!("covariate norm bound c1 must be at least 1, got {c1}")))
            }
            CovariateModel::Anisotropic { condition_number, c1 } if !(condition_number >= 1.0 && c1 >= 1.0) => {
                Err(Error::Argument("condition number and c1 must be at least 1".into()))
            }
            _ => Ok(()),
        }
    }

    /// Bound on `‖x‖` guaranteed by construction.
    pub fn norm_bound(&self, d: usize) -> f64 {
        let root = (d as f64).sqrt();
        match *self {
            CovariateModel::IsotropicGaussianClamped { c1 } => c1 * root,
            CovariateModel::BoundedUniform => 3f64.sqrt() * root,
            CovariateModel::Anisotropic { c1, .. } => c1 * root,
        }
    }

    pub fn draw(&self, d: usize, rng: &mut impl Rng) -> Vec<f64> {
        match *self {
            CovariateModel::BoundedUniform => {
                let s = 3f64.sqrt();
                (0..d).map(|_| rng.random_range(-s..=s)).collect()
            }
            CovariateModel::IsotropicGaussianClamped { c1 } => clamped_gaussian(d, c1, |_| 1.0, rng),
            CovariateModel::Anisotropic { condition_number, c1 } => {
                let decay = if d > 1 { condition_number.powf(-1.0 / (d - 1) as f64) } else { 1.0 };
                clamped_gaussian(d, c1, |j| decay.powi(j as i32).sqrt(), rng)
            }
        }
    }
}

fn clamped_gaussian(d: usize, c1: f64, scale: impl Fn(usize) -> f64, rng: &mut impl Rng) -> Vec<f64> {
    let bound = c1 * (d as f64).sqrt();
    loop {
        let x: Vec<f64> = (0..d).map(|j| scale(j) * rng.sample::<f64, _>(StandardNormal)).collect();
        if norm(&x) <= bound {
            return x;
        }
    }
}

impl NoiseModel {
    pub fn draw(&self, sigma: f64, rng: &mut impl Rng) -> f64 {
        if sigma == 0.0 {
            return 0.0;
        }
        match *self {
            NoiseModel::Gaussian => sigma * rng.sample::<f64, _>(StandardNormal),
            NoiseModel::Bounded => sigma * 3f64.sqrt() * rng.random_range(-1.0..=1.0),
            NoiseModel::StudentT { dof } => {
                let t: f64 = StudentT::new(dof).expect("dof checked").sample(rng);
                sigma * t / (dof / (dof - 2.0)).sqrt()
            }
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Argument(msg));
        if self.d == 0 || self.n == 0 || self.m == 0 {
            return bad("d, n and m must be positive".into());
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha must lie in (0, 1], got {}", self.alpha));
        }
        if self.w_stars.is_empty() {
            return bad("at least one planted regressor is required".into());
        }
        if let Some(w) = self.w_stars.iter().find(|w| w.len() != self.d || w.iter().any(|v| !v.is_finite())) {
            return bad(format!("planted regressor {w:?} must have {} finite entries", self.d));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be finite and non-negative".into());
        }
        if let NoiseModel::StudentT { dof } = self.noise {
            if !(dof > 2.0) {
                return bad(format!("student-t noise needs dof > 2, got {dof}"));
            }
        }
        self.covariates.check()?;
        let genuine = self.genuine_count();
        match &self.adversary {
            Adversary::None if genuine < self.m => {
                bad(format!("{} batches would be adversarial but no adversary is set", self.m - genuine))
            }
            Adversary::FixedWrongModel { w_adv } if w_adv.len() != self.d => {
                bad("adversarial regressor has the wrong dimension".into())
            }
            Adversary::PointMass { x0, .. } if x0.len() != self.d => bad("point mass has the wrong dimension".into()),
            Adversary::GradientAttack { shift } if shift.len() != self.d => {
                bad("gradient attack shift has the wrong dimension".into())
            }
            _ => Ok(()),
        }
    }

    /// `⌈αm⌉`, computed with a small tolerance so that e.g. `0.25 · 400` is 100.
    pub fn genuine_count(&self) -> usize {
        let raw = self.alpha * self.m as f64;
        let rounded = raw.round();
        let count = if (raw - rounded).abs() < 1e-9 { rounded } else { raw.ceil() };
        (count as usize).clamp(1, self.m)
    }

    /// A genuine batch of `component` drawn from `rng`.
    pub fn genuine_batch(&self, component: usize, rng: &mut impl Rng) -> Result<Batch> {
        let w = self
            .w_stars
            .get(component)
            .ok_or_else(|| Error::Argument(format!("no planted component {component}")))?;
        self.model_batch(w, rng)
    }

    fn model_batch(&self, w: &[f64], rng: &mut impl Rng) -> Result<Batch> {
        let mut xs = Vec::with_capacity(self.n * self.d);
        let mut ys = Vec::with_capacity(self.n);
        for _ in 0..self.n {
            let x = self.covariates.draw(self.d, rng);
            ys.push(dot(w, &x) + self.noise.draw(self.sigma, rng));
            xs.extend(x);
        }
        Batch::new(self.d, xs, ys)
    }

    fn adversarial_batch(&self, genuine: &[Batch], index: usize, rng: &mut impl Rng) -> Result<Batch> {
        let source = &genuine[index % genuine.len()];
        match &self.adversary {
            Adversary::None => Err(Error::Internal("adversarial batch requested without adversary".into())),
            Adversary::FixedWrongModel { w_adv } => self.model_batch(w_adv, rng),
            Adversary::Mirror { scale } => Batch::new(
                self.d,
                source.covariates().to_vec(),
                source.responses().iter().map(|y| -scale * y).collect(),
            ),
            Adversary::PointMass { x0, y0 } => Batch::new(self.d, x0.repeat(self.n), vec![*y0; self.n]),
            Adversary::GradientAttack { shift } => {
                let target: Vec<f64> = self.w_stars[0].iter().zip(shift).map(|(a, b)| a + b).collect();
                let xs = source.covariates().to_vec();
                let ys = xs
                    .chunks(self.d)
                    .map(|x| dot(&target, x) + self.noise.draw(self.sigma, rng))
                    .collect();
                Batch::new(self.d, xs, ys)
            }
        }
    }
}

/// Generates the collection described by `spec`.
///
/// Genuine batch `i` belongs to component `i mod k`; batches are then placed
/// in a seeded random order.
pub fn generate(spec: &GeneratorSpec) -> Result<LabeledCollection> {
    spec.validate()?;
    let k = spec.w_stars.len();
    let genuine_count = spec.genuine_count();
    let genuine = (0..genuine_count)
        .map(|i| spec.genuine_batch(i % k, &mut stream(spec.seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let adversarial = (genuine_count..spec.m)
        .map(|i| spec.adversarial_batch(&genuine, i - genuine_count, &mut stream(spec.seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;

    let mut order: Vec<usize> = (0..spec.m).collect();
    order.shuffle(&mut stream(spec.seed, PERMUTATION_STREAM));

    let mut batches = Vec::with_capacity(spec.m);
    let mut good_mask = Vec::with_capacity(spec.m);
    let mut component_of = Vec::with_capacity(spec.m);
    for &i in &order {
        if i < genuine_count {
            batches.push(genuine[i].clone());
            good_mask.push(true);
            component_of.push(Some(i % k));
        } else {
            batches.push(adversarial[i - genuine_count].clone());
            good_mask.push(false);
            component_of.push(None);
        }
    }
    Ok(LabeledCollection {
        coll: BatchCollection::new(batches)?,
        good_mask,
        component_of,
        w_stars: spec.w_stars.clone(),
    })
}

/// Fresh genuine batches of `component`, drawn from streams disjoint from
/// those used by [`generate`] with the same spec.
pub fn holdout_batches(spec: &GeneratorSpec, component: usize, count: usize, salt: u64) -> Result<Vec<Batch>> {
    spec.validate()?;
    let seed = spec.seed ^ HOLDOUT_SALT ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    (0..count)
        .map(|i| spec.genuine_batch(component, &mut stream(seed, i as u64)))
        .collect()
}

/// `k` random unit vectors in `R^d` with pairwise distances at least
/// `min_separation`, found by rejection.
pub fn planted_regressors(k: usize, d: usize, min_separation: f64, seed: u64) -> Result<Vec<Vec<f64>>> {
    if k == 0 || d == 0 {
        return Err(Error::Argument("need at least one regressor of positive dimension".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..10_000 {
        let ws: Vec<Vec<f64>> = (0..k)
            .map(|_| {
                let mut w: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                crate::linalg::normalize(&mut w);
                w
            })
            .collect();
        let separated = (0..k).all(|i| (i + 1..k).all(|j| crate::linalg::distance(&ws[i], &ws[j]) >= min_separation));
        if separated {
            return Ok(ws);
        }
    }
    Err(Error::Argument(format!(
        "could not place {k} unit regressors in dimension {d} with separation {min_separation}"
    )))
}
