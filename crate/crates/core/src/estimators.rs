//! Second-order estimators of deviation in each representation space, each
//! paired with the exact quantity it approximates.
//!
//! | space | exact | estimate |
//! |-------|-------|----------|
//! | embedding / logit | `1 - cos(x, x + Δx)` | `‖Δx⊥‖² / (2‖x‖²)` |
//! | probability | `1 - cos(p, q)` | `Var_r(Δz) / (2T²)`, `rᵢ ∝ pᵢ²` |
//! | probability | `KL(p‖q)` | `Var_p(Δz) / (2T²)` |
//!
//! Nothing here materializes a `V × V` matrix; every form reduces to weighted
//! moments over the vocabulary.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::{
    closed_form_perturbed, exact_kl_closed_form, softmax_t, squared_weight_dist,
    validate_temperature, Logits, ProbDist,
};
use crate::error::{Error, Result};
use crate::vecmath::{
    self, angular_deviation, clamp_variance, moments_unchecked, relative_orthogonal_magnitude,
    RealVector,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Embedding,
    Logit,
    Probability,
}

impl Space {
    pub fn as_str(self) -> &'static str {
        match self {
            Space::Embedding => "embedding",
            Space::Logit => "logit",
            Space::Probability => "probability",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    AngularDeviation,
    Kl,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::AngularDeviation => "angular_deviation",
            Metric::Kl => "kl",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviationEstimate {
    pub estimated: f64,
    pub exact: f64,
    /// `estimated - exact`, signed.
    pub abs_error: f64,
    pub space: Space,
    pub metric: Metric,
}

impl DeviationEstimate {
    pub(crate) fn new(estimated: f64, exact: f64, space: Space, metric: Metric) -> Self {
        Self {
            estimated,
            exact,
            abs_error: estimated - exact,
            space,
            metric,
        }
    }
}

fn check_dims(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("dimension mismatch: {a} vs {b}")));
    }
    Ok(())
}

/// Angular deviation of a linear representation (hidden state or logits)
/// against `‖Δ⊥‖² / (2‖base‖²)`.
pub fn est_angular_deviation_linear(
    base: &RealVector,
    delta: &RealVector,
    space: Space,
) -> Result<DeviationEstimate> {
    let estimated = relative_orthogonal_magnitude(base, delta)? / 2.0;
    let exact = angular_deviation(base, &base.add(delta)?)?;
    Ok(DeviationEstimate::new(
        estimated,
        exact,
        space,
        Metric::AngularDeviation,
    ))
}

/// `Var_r(Δz) / (2T²)` with `rᵢ = pᵢ² / ‖p‖²`.
pub(crate) fn prob_angular_estimate(p: &ProbDist, delta_z: &RealVector, t: f64) -> f64 {
    let r = squared_weight_dist(p);
    moments_unchecked(delta_z.as_slice(), r.as_slice()).variance / (2.0 * t * t)
}

/// `Var_p(Δz) / (2T²)`.
pub(crate) fn kl_estimate(p: &ProbDist, delta_z: &RealVector, t: f64) -> f64 {
    moments_unchecked(delta_z.as_slice(), p.as_slice()).variance / (2.0 * t * t)
}

/// Angular deviation in probability space against `Var_r(Δz) / (2T²)`.
pub fn est_angular_deviation_prob(
    p: &ProbDist,
    delta_z: &RealVector,
    temperature: f64,
) -> Result<DeviationEstimate> {
    check_dims(p.dim(), delta_z.dim())?;
    validate_temperature(temperature)?;
    let estimated = prob_angular_estimate(p, delta_z, temperature);
    let q = closed_form_perturbed(p, delta_z, temperature)?;
    let exact = angular_deviation(p.as_vector(), q.as_vector())?;
    Ok(DeviationEstimate::new(
        estimated,
        exact,
        Space::Probability,
        Metric::AngularDeviation,
    ))
}

/// The same second-order probability-space estimate, written out in terms
/// of `μ = E_p[Δz]` and `p²`-weighted sums:
///
/// `(1 / (2T²‖p‖²)) · [Σ pᵢ²(Δzᵢ - μ)² - (Σ pᵢ²Δzᵢ - ‖p‖²μ)² / ‖p‖²]`
pub fn est_angular_deviation_prob_explicit(
    p: &ProbDist,
    delta_z: &RealVector,
    temperature: f64,
) -> Result<f64> {
    check_dims(p.dim(), delta_z.dim())?;
    validate_temperature(temperature)?;
    let (p, dz) = (p.as_slice(), delta_z.as_slice());
    let n = p.len();
    let p_norm_sq = vecmath::dot(p, p);
    let mu = vecmath::dot(p, dz);
    let first = vecmath::sum_with_len(
        n,
        p.iter()
            .zip(dz)
            .map(|(pi, d)| pi * pi * (d - mu) * (d - mu)),
    );
    // Σ pᵢ²Δzᵢ - ‖p‖²μ, summed term by term to avoid cancelling two large sums
    let cross = vecmath::sum_with_len(n, p.iter().zip(dz).map(|(pi, d)| pi * pi * (d - mu)));
    let bracket = clamp_variance(first - cross * cross / p_norm_sq);
    Ok(bracket / (2.0 * temperature * temperature * p_norm_sq))
}

/// `KL(p‖q)` against `Var_p(Δz) / (2T²)`.
pub fn est_kl(p: &ProbDist, delta_z: &RealVector, temperature: f64) -> Result<DeviationEstimate> {
    check_dims(p.dim(), delta_z.dim())?;
    validate_temperature(temperature)?;
    let estimated = kl_estimate(p, delta_z, temperature);
    let exact = exact_kl_closed_form(p, delta_z, temperature)?;
    Ok(DeviationEstimate::new(
        estimated,
        exact,
        Space::Probability,
        Metric::Kl,
    ))
}

/// First-order softmax response `(1/T)(diag(p) - ppᵀ)Δz`, entry `i` being `pᵢ(Δzᵢ - E_p[Δz])/T`.
pub fn first_order_delta_p(
    p: &ProbDist,
    delta_z: &RealVector,
    temperature: f64,
) -> Result<RealVector> {
    check_dims(p.dim(), delta_z.dim())?;
    validate_temperature(temperature)?;
    let mu = vecmath::dot(p.as_slice(), delta_z.as_slice());
    RealVector::new(
        p.as_slice()
            .iter()
            .zip(delta_z.iter())
            .map(|(pi, d)| pi * (d - mu) / temperature)
            .collect(),
    )
}

// ---------------------------------------------------------------------------
// Convergence probe
// ---------------------------------------------------------------------------

/// Which estimator the convergence probe exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeSpace {
    /// Angular deviation of the logits themselves.
    Linear,
    /// Angular deviation of `softmax(z/T)`.
    Probability,
    Kl,
}

impl ProbeSpace {
    pub const ALL: [ProbeSpace; 3] = [ProbeSpace::Linear, ProbeSpace::Probability, ProbeSpace::Kl];

    pub fn as_str(self) -> &'static str {
        match self {
            ProbeSpace::Linear => "linear",
            ProbeSpace::Probability => "probability",
            ProbeSpace::Kl => "kl",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeDirection {
    /// Seeded Gaussian direction, normalized.
    #[default]
    Random,
    /// The perturbation is a multiple of the base logits.
    Colinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub seed: u64,
    pub space: ProbeSpace,
    /// Relative perturbation sizes `‖Δz‖ / ‖z‖`, strictly decreasing.
    pub epsilons: Vec<f64>,
    pub trials: usize,
    pub vocab: usize,
    pub temperature: f64,
    #[serde(default)]
    pub direction: ProbeDirection,
}

impl ProbeConfig {
    pub fn new(
        seed: u64,
        space: ProbeSpace,
        epsilons: Vec<f64>,
        trials: usize,
        vocab: usize,
    ) -> Self {
        Self {
            seed,
            space,
            epsilons,
            trials,
            vocab,
            temperature: 1.0,
            direction: ProbeDirection::Random,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilons.len() < 2 {
            return Err(Error::Validation(
                "convergence probe needs at least two epsilons".into(),
            ));
        }
        if self.epsilons.iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
            return Err(Error::Validation("epsilons must be positive".into()));
        }
        if self.epsilons.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Validation(
                "epsilons must be strictly decreasing".into(),
            ));
        }
        if self.trials == 0 {
            return Err(Error::Validation("trials must be >= 1".into()));
        }
        if self.vocab < 2 {
            return Err(Error::Validation("vocab must be >= 2".into()));
        }
        validate_temperature(self.temperature)
    }
}

/// Aggregate over all trials at one perturbation size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbePoint {
    pub epsilon: f64,
    pub mean_abs_error: f64,
    pub mean_exact: f64,
    pub mean_estimated: f64,
    pub min_exact: f64,
    pub max_exact: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvergenceOrder {
    /// The estimator matched the exact value to round-off at every size.
    Exact,
    /// Least-squares slope of `log(error)` against `log(ε)`.
    Fitted(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub space: ProbeSpace,
    pub points: Vec<ProbePoint>,
    pub order: ConvergenceOrder,
}

/// Errors at or below this are treated as round-off.
const EXACT_ERROR_FLOOR: f64 = 64.0 * f64::EPSILON;
const MAX_REDRAWS: usize = 16;
const PROBE_LOGIT_STD: f64 = 2.0;

/// SplitMix64 finalizer over `(root, index)`: an independent stream seed per trial.
pub fn derive_seed(root: u64, index: u64) -> u64 {
    let mut z = root ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct ProbePair {
    logits: RealVector,
    direction: RealVector,
}

fn draw_pair(config: &ProbeConfig, trial: usize) -> Result<ProbePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, trial as u64));
    let logit_dist = Normal::new(0.0, PROBE_LOGIT_STD).expect("valid std");
    let unit = Normal::new(0.0, 1.0).expect("valid std");
    for _ in 0..MAX_REDRAWS {
        let z: Vec<f64> = (0..config.vocab)
            .map(|_| logit_dist.sample(&mut rng))
            .collect();
        let d: Vec<f64> = match config.direction {
            ProbeDirection::Random => (0..config.vocab).map(|_| unit.sample(&mut rng)).collect(),
            ProbeDirection::Colinear => z.clone(),
        };
        let z = RealVector::new(z)?;
        let d = RealVector::new(d)?;
        let (zn, dn) = (z.norm(), d.norm());
        if zn > 0.0 && dn > 0.0 {
            return Ok(ProbePair {
                logits: z,
                direction: d.scale(1.0 / dn)?,
            });
        }
    }
    Err(Error::Invariant(format!(
        "trial {trial}: {MAX_REDRAWS} consecutive degenerate draws"
    )))
}

fn probe_once(config: &ProbeConfig, pair: &ProbePair, epsilon: f64) -> Result<DeviationEstimate> {
    let delta = pair.direction.scale(epsilon * pair.logits.norm())?;
    let t = config.temperature;
    match config.space {
        ProbeSpace::Linear => est_angular_deviation_linear(&pair.logits, &delta, Space::Logit),
        ProbeSpace::Probability | ProbeSpace::Kl => {
            let p = softmax_t(&Logits::new(pair.logits.clone(), t)?);
            if config.space == ProbeSpace::Probability {
                est_angular_deviation_prob(&p, &delta, t)
            } else {
                est_kl(&p, &delta, t)
            }
        }
    }
}

/// Least-squares slope of `y` on `x`.
pub fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Measures how fast the estimator error shrinks with the perturbation size.
///
/// The same seeded `(logits, direction)` pairs are reused at every ε, so
/// the fitted slope reflects the remainder term rather than sampling noise.
/// Trials run in parallel; each trial owns its seed, so results do not
/// depend on scheduling.
pub fn convergence_probe(config: &ProbeConfig) -> Result<ProbeReport> {
    config.validate()?;
    let pairs: Vec<ProbePair> = (0..config.trials)
        .into_par_iter()
        .map(|trial| draw_pair(config, trial))
        .collect::<Result<_>>()?;

    let mut points = Vec::with_capacity(config.epsilons.len());
    for &epsilon in &config.epsilons {
        let estimates: Vec<DeviationEstimate> = pairs
            .par_iter()
            .map(|pair| probe_once(config, pair, epsilon))
            .collect::<Result<_>>()?;
        let n = estimates.len() as f64;
        points.push(ProbePoint {
            epsilon,
            mean_abs_error: estimates.iter().map(|e| e.abs_error.abs()).sum::<f64>() / n,
            mean_exact: estimates.iter().map(|e| e.exact).sum::<f64>() / n,
            mean_estimated: estimates.iter().map(|e| e.estimated).sum::<f64>() / n,
            min_exact: estimates
                .iter()
                .map(|e| e.exact)
                .fold(f64::INFINITY, f64::min),
            max_exact: estimates
                .iter()
                .map(|e| e.exact)
                .fold(f64::NEG_INFINITY, f64::max),
        });
    }

    let order = if points.iter().all(|p| p.mean_abs_error <= EXACT_ERROR_FLOOR) {
        ConvergenceOrder::Exact
    } else {
        let xs: Vec<f64> = points.iter().map(|p| p.epsilon.ln()).collect();
        let ys: Vec<f64> = points
            .iter()
            .map(|p| p.mean_abs_error.max(f64::MIN_POSITIVE).ln())
            .collect();
        ConvergenceOrder::Fitted(least_squares_slope(&xs, &ys))
    };
    Ok(ProbeReport {
        space: config.space,
        points,
        order,
    })
}
