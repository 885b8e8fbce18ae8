//! Temperature softmax and exact probability-space metrics.
//!
//! All logarithms are natural; KL divergences are in nats.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vecmath::{self, tol, RealVector};

/// Pre-softmax scores together with the sampling temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Logits {
    scores: RealVector,
    temperature: f64,
}

impl Logits {
    pub fn new(scores: RealVector, temperature: f64) -> Result<Self> {
        validate_temperature(temperature)?;
        Ok(Self {
            scores,
            temperature,
        })
    }

    pub fn from_vec(scores: Vec<f64>, temperature: f64) -> Result<Self> {
        Self::new(RealVector::new(scores)?, temperature)
    }

    pub fn scores(&self) -> &RealVector {
        &self.scores
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn vocab_size(&self) -> usize {
        self.scores.dim()
    }

    /// Same scores at another temperature.
    pub fn with_temperature(&self, temperature: f64) -> Result<Self> {
        Self::new(self.scores.clone(), temperature)
    }
}

pub(crate) fn validate_temperature(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Validation(format!(
            "temperature must be positive and finite, got {t}"
        )));
    }
    Ok(())
}

/// A probability vector over the vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RealVector", into = "RealVector")]
pub struct ProbDist(RealVector);

impl ProbDist {
    pub fn new(probs: RealVector) -> Result<Self> {
        vecmath::validate_weights(probs.as_slice(), probs.dim())?;
        Ok(Self(probs))
    }

    pub fn from_vec(probs: Vec<f64>) -> Result<Self> {
        Self::new(RealVector::new(probs)?)
    }

    /// Normalizes nonnegative weights with a positive total.
    pub(crate) fn normalized(weights: Vec<f64>) -> Self {
        let total = vecmath::sum(&weights);
        debug_assert!(total > 0.0);
        Self(RealVector::new(weights.into_iter().map(|w| w / total).collect()).expect("finite"))
    }

    pub fn as_vector(&self) -> &RealVector {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn dim(&self) -> usize {
        self.0.dim()
    }

    pub fn argmax(&self) -> usize {
        argmax_lowest(self.as_slice())
    }
}

impl TryFrom<RealVector> for ProbDist {
    type Error = Error;

    fn try_from(v: RealVector) -> Result<Self> {
        ProbDist::new(v)
    }
}

impl From<ProbDist> for RealVector {
    fn from(p: ProbDist) -> Self {
        p.0
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub(crate) fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate().skip(1) {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Strictly increasing, non-empty set of token indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet(Vec<usize>);

impl CandidateSet {
    pub fn new(mut indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Validation("candidate set must be non-empty".into()));
        }
        indices.sort_unstable();
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Validation("candidate set has duplicates".into()));
        }
        Ok(Self(indices))
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }
}

fn check_dims(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("dimension mismatch: {a} vs {b}")));
    }
    Ok(())
}

/// `log Σ exp(xᵢ)` over the finite entries of `xs`.
fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + vecmath::sum_with_len(xs.len(), xs.iter().map(|x| (x - max).exp())).ln()
}

/// `softmax(z / T)` with max subtraction.
pub fn softmax_t(logits: &Logits) -> ProbDist {
    let t = logits.temperature;
    let scaled: Vec<f64> = logits.scores.iter().map(|z| z / t).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    ProbDist::normalized(scaled.iter().map(|s| (s - max).exp()).collect())
}

/// Natural-log probabilities `log softmax(z / T)`.
pub fn log_softmax_t(logits: &Logits) -> Vec<f64> {
    let t = logits.temperature;
    let scaled: Vec<f64> = logits.scores.iter().map(|z| z / t).collect();
    let lse = log_sum_exp(&scaled);
    scaled.iter().map(|s| s - lse).collect()
}

/// `KL(p‖q) = Σ pᵢ log(pᵢ / qᵢ)`, skipping terms with `pᵢ = 0`.
pub fn exact_kl(p: &ProbDist, q: &ProbDist) -> Result<f64> {
    check_dims(p.dim(), q.dim())?;
    let (p, q) = (p.as_slice(), q.as_slice());
    if let Some(i) = (0..p.len()).find(|&i| p[i] > 0.0 && q[i] == 0.0) {
        return Err(Error::SupportMismatch { index: i, p: p[i] });
    }
    let kl = vecmath::sum_with_len(
        p.len(),
        p.iter()
            .zip(q)
            .filter(|(pi, _)| **pi > 0.0)
            .map(|(pi, qi)| pi * (pi / qi).ln()),
    );
    Ok(kl.max(0.0))
}

/// Log weights `log pᵢ + Δzᵢ/T` for the reweighted distribution.
fn reweighted_log_weights(p: &ProbDist, delta_z: &RealVector, t: f64) -> Vec<f64> {
    p.as_slice()
        .iter()
        .zip(delta_z.iter())
        .map(|(pi, dz)| {
            if *pi > 0.0 {
                pi.ln() + dz / t
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect()
}

/// `KL(p‖q) = -E_p[Δz]/T + log E_p[exp(Δz/T)]` where `q` is `p` reweighted by `exp(Δz/T)`.
///
/// Evaluated as `log E_p[exp((Δz - E_p[Δz]) / T)]`, a log-sum-exp over
/// `log pᵢ + (Δzᵢ - μ)/T`; the two terms of the closed form cancel exactly
/// in this arrangement.
pub fn exact_kl_closed_form(p: &ProbDist, delta_z: &RealVector, temperature: f64) -> Result<f64> {
    check_dims(p.dim(), delta_z.dim())?;
    validate_temperature(temperature)?;
    let mu = vecmath::dot(p.as_slice(), delta_z.as_slice());
    let centered = RealVector::new(delta_z.iter().map(|d| d - mu).collect())?;
    let kl = log_sum_exp(&reweighted_log_weights(p, &centered, temperature));
    Ok(kl.max(0.0))
}

/// `qᵢ = pᵢ exp(Δzᵢ/T) / E_p[exp(Δz/T)]`, i.e. `softmax((z + Δz)/T)` for any `z` producing `p`.
pub fn closed_form_perturbed(
    p: &ProbDist,
    delta_z: &RealVector,
    temperature: f64,
) -> Result<ProbDist> {
    check_dims(p.dim(), delta_z.dim())?;
    validate_temperature(temperature)?;
    let logw = reweighted_log_weights(p, delta_z, temperature);
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(ProbDist::normalized(
        logw.iter().map(|w| (w - max).exp()).collect(),
    ))
}

/// `rᵢ = pᵢ² / Σⱼ pⱼ²`.
pub fn squared_weight_dist(p: &ProbDist) -> ProbDist {
    ProbDist::normalized(p.as_slice().iter().map(|x| x * x).collect())
}

/// Log-probabilities of a candidate subset and the restricted decision.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateScores {
    /// `log softmax_t(z)` at each candidate, in candidate order.
    pub log_probs: Vec<f64>,
    /// The candidate token with the highest probability (lowest index on ties).
    pub argmax: usize,
}

pub fn candidate_scores(logits: &Logits, candidates: &CandidateSet) -> Result<CandidateScores> {
    let v = logits.vocab_size();
    if let Some(&bad) = candidates.indices().iter().find(|&&i| i >= v) {
        return Err(Error::Index(format!(
            "candidate token {bad} outside vocabulary of size {v}"
        )));
    }
    let all = log_softmax_t(logits);
    let log_probs: Vec<f64> = candidates.indices().iter().map(|&i| all[i]).collect();
    // Compare on the raw logits so the decision does not depend on rounding in the log-normalizer.
    let raw: Vec<f64> = candidates
        .indices()
        .iter()
        .map(|&i| logits.scores()[i])
        .collect();
    let argmax = candidates.indices()[argmax_lowest(&raw)];
    Ok(CandidateScores { log_probs, argmax })
}

/// True when every entry agrees within `tol::ABS`.
pub fn approx_equal(p: &ProbDist, q: &ProbDist) -> bool {
    p.dim() == q.dim()
        && p.as_slice()
            .iter()
            .zip(q.as_slice())
            .all(|(a, b)| (a - b).abs() <= tol::ABS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn logits(z: &[f64], t: f64) -> Logits {
        Logits::from_vec(z.to_vec(), t).unwrap()
    }

    fn pd(p: &[f64]) -> ProbDist {
        ProbDist::from_vec(p.to_vec()).unwrap()
    }

    fn rv(v: &[f64]) -> RealVector {
        RealVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        for t in [0.5, 1.0, 3.0] {
            let p = softmax_t(&logits(&[1., 1., 1.], t));
            for x in p.as_slice() {
                assert_abs_diff_eq!(*x, 1.0 / 3.0, epsilon = 1e-15);
            }
        }
        let p = softmax_t(&logits(&[2f64.ln(), 0.0], 1.0));
        assert_abs_diff_eq!(p.as_slice()[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.as_slice()[1], 1.0 / 3.0, epsilon = 1e-15);

        let p = softmax_t(&logits(&[2.0, 0.0], 2.0));
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(p.as_slice()[0], e / (e + 1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(p.as_slice()[0], 0.731059, epsilon = 5e-7);
        assert_abs_diff_eq!(p.as_slice()[1], 0.268941, epsilon = 5e-7);
    }

    #[test]
    fn invalid_temperature_rejected() {
        assert!(Logits::from_vec(vec![1.0], 0.0).is_err());
        assert!(Logits::from_vec(vec![1.0], -1.0).is_err());
        assert!(Logits::from_vec(vec![1.0], f64::NAN).is_err());
    }

    #[test]
    fn prob_dist_validation() {
        assert!(ProbDist::from_vec(vec![0.5, 0.6]).is_err());
        assert!(ProbDist::from_vec(vec![1.5, -0.5]).is_err());
        assert!(ProbDist::from_vec(vec![0.25; 4]).is_ok());
    }

    #[test]
    fn kl_examples() {
        let p = pd(&[0.3, 0.7]);
        assert_eq!(exact_kl(&p, &p).unwrap(), 0.0);

        // q = softmax(0.2, 0)
        let q = softmax_t(&logits(&[0.2, 0.0], 1.0));
        let half = pd(&[0.5, 0.5]);
        let by_hand = 0.5 * (0.5 / q.as_slice()[0]).ln() + 0.5 * (0.5 / q.as_slice()[1]).ln();
        assert_abs_diff_eq!(exact_kl(&half, &q).unwrap(), by_hand, epsilon = 1e-16);
        assert_abs_diff_eq!(by_hand, 0.004992, epsilon = 5e-7);

        let kl = exact_kl(&pd(&[1.0, 0.0]), &half).unwrap();
        assert_abs_diff_eq!(kl, 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn kl_support_mismatch() {
        let err = exact_kl(&pd(&[0.5, 0.5]), &pd(&[1.0, 0.0])).unwrap_err();
        assert!(matches!(err, Error::SupportMismatch { index: 1, .. }));
        // zero mass in p where q is zero is fine
        assert!(exact_kl(&pd(&[1.0, 0.0]), &pd(&[1.0, 0.0])).is_ok());
    }

    #[test]
    fn closed_form_kl_examples() {
        let p = pd(&[0.1, 0.2, 0.7]);
        assert_eq!(
            exact_kl_closed_form(&p, &rv(&[0., 0., 0.]), 1.0).unwrap(),
            0.0
        );
        assert_abs_diff_eq!(
            exact_kl_closed_form(&p, &rv(&[3., 3., 3.]), 0.7).unwrap(),
            0.0,
            epsilon = 1e-15
        );
        let half = pd(&[0.5, 0.5]);
        let q = softmax_t(&logits(&[0.2, 0.0], 1.0));
        assert_abs_diff_eq!(
            exact_kl_closed_form(&half, &rv(&[0.2, 0.0]), 1.0).unwrap(),
            exact_kl(&half, &q).unwrap(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn closed_form_perturbed_examples() {
        let p = pd(&[0.1, 0.2, 0.7]);
        assert!(approx_equal(
            &closed_form_perturbed(&p, &rv(&[0., 0., 0.]), 1.0).unwrap(),
            &p
        ));
        let shifted = closed_form_perturbed(&p, &rv(&[-4., -4., -4.]), 2.0).unwrap();
        assert!(approx_equal(&shifted, &p));

        let q = closed_form_perturbed(&pd(&[0.5, 0.5]), &rv(&[0.2, 0.0]), 1.0).unwrap();
        let direct = softmax_t(&logits(&[0.2, 0.0], 1.0));
        assert_abs_diff_eq!(q.as_slice()[0], direct.as_slice()[0], epsilon = 1e-15);
        assert_abs_diff_eq!(q.as_slice()[0], 0.549834, epsilon = 5e-7);
        assert_abs_diff_eq!(q.as_slice()[1], 0.450166, epsilon = 5e-7);
    }

    #[test]
    fn closed_form_keeps_zero_mass() {
        let q = closed_form_perturbed(&pd(&[0.0, 1.0]), &rv(&[5.0, 0.0]), 1.0).unwrap();
        assert_eq!(q.as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn squared_weight_examples() {
        let r = squared_weight_dist(&pd(&[0.25; 4]));
        for x in r.as_slice() {
            assert_abs_diff_eq!(*x, 0.25, epsilon = 1e-16);
        }
        let r = squared_weight_dist(&pd(&[0.8, 0.2]));
        assert_abs_diff_eq!(r.as_slice()[0], 0.64 / 0.68, epsilon = 1e-15);
        assert_abs_diff_eq!(r.as_slice()[1], 0.04 / 0.68, epsilon = 1e-15);
        assert_abs_diff_eq!(r.as_slice()[0], 0.941176, epsilon = 5e-7);
        let r = squared_weight_dist(&pd(&[0.0, 1.0, 0.0]));
        assert_eq!(r.as_slice(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn candidate_examples() {
        let z = logits(&[5., 4., 1., 2., 0.], 1.0);
        let c = CandidateSet::new(vec![2, 3]).unwrap();
        let s = candidate_scores(&z, &c).unwrap();
        assert_eq!(s.argmax, 3);
        let logp = log_softmax_t(&z);
        assert_eq!(s.log_probs, vec![logp[2], logp[3]]);

        let full = CandidateSet::new((0..5).collect()).unwrap();
        assert_eq!(candidate_scores(&z, &full).unwrap().argmax, 0);

        let shifted = logits(&[15., 14., 11., 12., 10.], 1.0);
        let s2 = candidate_scores(&shifted, &c).unwrap();
        assert_eq!(s2.argmax, s.argmax);
        assert_abs_diff_eq!(
            s2.log_probs[1] - s2.log_probs[0],
            s.log_probs[1] - s.log_probs[0],
            epsilon = 1e-12
        );
    }

    #[test]
    fn candidate_ties_and_errors() {
        let z = logits(&[1., 3., 3., 0.], 1.0);
        let c = CandidateSet::new(vec![2, 1]).unwrap();
        assert_eq!(c.indices(), &[1, 2]);
        assert_eq!(candidate_scores(&z, &c).unwrap().argmax, 1);
        assert!(matches!(
            candidate_scores(&z, &CandidateSet::new(vec![4]).unwrap()),
            Err(Error::Index(_))
        ));
        assert!(CandidateSet::new(vec![]).is_err());
        assert!(CandidateSet::new(vec![1, 1]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(
            z in prop::collection::vec(-50.0..50.0_f64, 1..80),
            t in prop::sample::select(vec![0.5, 1.0, 2.0]),
        ) {
            let p = softmax_t(&Logits::from_vec(z, t).unwrap());
            let s: f64 = p.as_slice().iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn kl_nonnegative(
            a in prop::collection::vec(-5.0..5.0_f64, 2..20),
            shift in -3.0..3.0_f64,
        ) {
            let p = softmax_t(&Logits::from_vec(a.clone(), 1.0).unwrap());
            let b: Vec<f64> = a.iter().enumerate().map(|(i, x)| x + shift * (i as f64).sin()).collect();
            let q = softmax_t(&Logits::from_vec(b, 1.0).unwrap());
            let kl = exact_kl(&p, &q).unwrap();
            prop_assert!(kl >= 0.0);
            if kl == 0.0 {
                prop_assert!(approx_equal(&p, &q));
            }
        }

        #[test]
        fn restricted_argmax_invariant_under_monotone_maps(
            z in prop::collection::vec(-10.0..10.0_f64, 5..30),
            shift in -100.0..100.0_f64,
            t in 0.1..10.0_f64,
            picks in prop::collection::vec(0usize..5, 1..5),
        ) {
            let c = match CandidateSet::new({ let mut p = picks; p.dedup(); p.sort(); p.dedup(); p }) {
                Ok(c) => c,
                Err(_) => return Ok(()),
            };
            let base = candidate_scores(&Logits::from_vec(z.clone(), 1.0).unwrap(), &c).unwrap();
            let moved = Logits::from_vec(z.iter().map(|x| x + shift).collect(), t).unwrap();
            prop_assert_eq!(candidate_scores(&moved, &c).unwrap().argmax, base.argmax);
        }
    }
}
