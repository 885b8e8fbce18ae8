//! Exact vector-space primitives: cosine similarity, angular deviation,
//! orthogonal decomposition against a base vector and weighted moments.
//!
//! Every estimator in [`crate::estimators`] reduces to these operations, so
//! they are kept free of any approximation. Sums over 1024 or more terms use
//! Neumaier compensation.

use std::ops::Index;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default tolerances shared by the validating constructors and the tests.
pub mod tol {
    /// Absolute tolerance for quantities that should vanish exactly.
    pub const ABS: f64 = 1e-10;
    /// Relative tolerance for two evaluations of the same quantity.
    pub const REL: f64 = 1e-12;
    /// Negative variances in `[-VARIANCE_CLAMP, 0)` are cancellation noise.
    pub const VARIANCE_CLAMP: f64 = 1e-12;
    /// Allowed deviation of a probability vector's sum from 1.
    pub const PROB_SUM: f64 = 1e-9;
}

const COMPENSATED_MIN_LEN: usize = 1024;

/// Sum of an iterator, compensated when `len` is large.
pub(crate) fn sum_with_len(len: usize, terms: impl Iterator<Item = f64>) -> f64 {
    if len < COMPENSATED_MIN_LEN {
        return terms.sum();
    }
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for x in terms {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

pub(crate) fn sum(xs: &[f64]) -> f64 {
    sum_with_len(xs.len(), xs.iter().copied())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    sum_with_len(a.len(), a.iter().zip(b).map(|(x, y)| x * y))
}

/// A non-empty vector of finite reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct RealVector(Vec<f64>);

impl RealVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Validation("vector must have dim >= 1".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "vector entry {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Result<Self> {
        Self::new(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.0.iter()
    }

    pub fn dot(&self, other: &RealVector) -> Result<f64> {
        check_dims(self, other)?;
        Ok(dot(&self.0, &other.0))
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.0, &self.0)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn add(&self, other: &RealVector) -> Result<RealVector> {
        check_dims(self, other)?;
        RealVector::new(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &RealVector) -> Result<RealVector> {
        check_dims(self, other)?;
        RealVector::new(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn scale(&self, factor: f64) -> Result<RealVector> {
        RealVector::new(self.0.iter().map(|a| a * factor).collect())
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl TryFrom<Vec<f64>> for RealVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        RealVector::new(values)
    }
}

impl From<RealVector> for Vec<f64> {
    fn from(v: RealVector) -> Self {
        v.0
    }
}

impl Index<usize> for RealVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

fn check_dims(a: &RealVector, b: &RealVector) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "dimension mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

fn nonzero_norm(v: &RealVector, name: &str) -> Result<f64> {
    let n = v.norm();
    if n == 0.0 {
        return Err(Error::Domain(format!("argument `{name}` has zero norm")));
    }
    Ok(n)
}

/// `aᵀb / (‖a‖‖b‖)`, clamped into `[-1, 1]`.
pub fn cosine_similarity(a: &RealVector, b: &RealVector) -> Result<f64> {
    check_dims(a, b)?;
    let na = nonzero_norm(a, "a")?;
    let nb = nonzero_norm(b, "b")?;
    if a == b {
        return Ok(1.0);
    }
    Ok((dot(&a.0, &b.0) / (na * nb)).clamp(-1.0, 1.0))
}

/// `1 - cosine_similarity(a, b)`, in `[0, 2]`.
pub fn angular_deviation(a: &RealVector, b: &RealVector) -> Result<f64> {
    Ok(1.0 - cosine_similarity(a, b)?)
}

/// A perturbation split into its components along and across a base vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthogonalSplit {
    pub parallel: RealVector,
    pub orthogonal: RealVector,
    pub base_norm_sq: f64,
}

impl OrthogonalSplit {
    /// Coefficient `c` with `parallel = c · base`.
    pub fn coefficient(&self, base: &RealVector) -> f64 {
        dot(&self.parallel.0, &base.0) / self.base_norm_sq
    }
}

pub fn decompose_orthogonal(base: &RealVector, delta: &RealVector) -> Result<OrthogonalSplit> {
    check_dims(base, delta)?;
    let base_norm_sq = base.norm_sq();
    if base_norm_sq == 0.0 {
        return Err(Error::Domain("argument `base` has zero norm".into()));
    }
    let coef = dot(&base.0, &delta.0) / base_norm_sq;
    let parallel: Vec<f64> = base.0.iter().map(|b| coef * b).collect();
    let orthogonal: Vec<f64> = delta.0.iter().zip(&parallel).map(|(d, p)| d - p).collect();
    Ok(OrthogonalSplit {
        parallel: RealVector(parallel),
        orthogonal: RealVector(orthogonal),
        base_norm_sq,
    })
}

/// `‖delta⊥‖² / ‖base‖²`.
pub fn relative_orthogonal_magnitude(base: &RealVector, delta: &RealVector) -> Result<f64> {
    let split = decompose_orthogonal(base, delta)?;
    Ok(split.orthogonal.norm_sq() / split.base_norm_sq)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedMoments {
    pub mean: f64,
    pub second_moment: f64,
    pub variance: f64,
}

/// Checks that `weights` is a probability vector over `dim` entries.
pub(crate) fn validate_weights(weights: &[f64], dim: usize) -> Result<()> {
    if weights.len() != dim {
        return Err(Error::Shape(format!(
            "weights have {} entries, values have {dim}",
            weights.len()
        )));
    }
    if let Some(i) = weights.iter().position(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::Validation(format!(
            "weight {i} is negative or not finite ({})",
            weights[i]
        )));
    }
    let total = sum(weights);
    if (total - 1.0).abs() > tol::PROB_SUM {
        return Err(Error::Validation(format!(
            "weights sum to {total}, expected 1"
        )));
    }
    Ok(())
}

/// Mean, second moment and variance of `values` under `weights`.
///
/// The variance is accumulated as `Σ wᵢ (vᵢ - mean)²`, which equals
/// `second_moment - mean²` but does not cancel catastrophically.
pub fn weighted_moments(values: &RealVector, weights: &[f64]) -> Result<WeightedMoments> {
    validate_weights(weights, values.dim())?;
    Ok(moments_unchecked(&values.0, weights))
}

pub(crate) fn moments_unchecked(values: &[f64], weights: &[f64]) -> WeightedMoments {
    let n = values.len();
    let mean = sum_with_len(n, values.iter().zip(weights).map(|(v, w)| w * v));
    let second_moment = sum_with_len(n, values.iter().zip(weights).map(|(v, w)| w * v * v));
    let centered = sum_with_len(
        n,
        values
            .iter()
            .zip(weights)
            .map(|(v, w)| w * (v - mean) * (v - mean)),
    );
    WeightedMoments {
        mean,
        second_moment,
        variance: clamp_variance(centered),
    }
}

/// Clamps cancellation noise in `[-VARIANCE_CLAMP, 0)` to zero.
pub(crate) fn clamp_variance(v: f64) -> f64 {
    if (-tol::VARIANCE_CLAMP..0.0).contains(&v) {
        0.0
    } else {
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn rv(v: &[f64]) -> RealVector {
        RealVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(RealVector::new(vec![]).is_err());
        assert!(RealVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(RealVector::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert_abs_diff_eq!(
            cosine_similarity(&rv(&[1., 2., 3.]), &rv(&[1., 2., 3.])).unwrap(),
            1.0,
            epsilon = 1e-15
        );
        assert_eq!(
            cosine_similarity(&rv(&[1., 0.]), &rv(&[0., 1.])).unwrap(),
            0.0
        );
        assert_abs_diff_eq!(
            cosine_similarity(&rv(&[3., 4.]), &rv(&[4., 3.])).unwrap(),
            24.0 / 25.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn cosine_errors() {
        let err = cosine_similarity(&rv(&[0., 0.]), &rv(&[1., 0.])).unwrap_err();
        assert!(err.to_string().contains("`a`"), "{err}");
        let err = cosine_similarity(&rv(&[1., 0.]), &rv(&[0., 0.])).unwrap_err();
        assert!(err.to_string().contains("`b`"), "{err}");
        assert!(matches!(
            cosine_similarity(&rv(&[1., 0.]), &rv(&[1., 0., 0.])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn angular_examples() {
        assert_abs_diff_eq!(
            angular_deviation(&rv(&[5., 5.]), &rv(&[5., 5.])).unwrap(),
            0.0,
            epsilon = 1e-15
        );
        assert_eq!(
            angular_deviation(&rv(&[1., 0.]), &rv(&[-1., 0.])).unwrap(),
            2.0
        );
        let expected = 1.0 - 1.0 / 1.04_f64.sqrt();
        assert_abs_diff_eq!(
            angular_deviation(&rv(&[1., 0.]), &rv(&[1., 0.2])).unwrap(),
            expected,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(expected, 0.019419, epsilon = 5e-7);
    }

    #[test]
    fn decompose_examples() {
        let s = decompose_orthogonal(&rv(&[3., 4.]), &rv(&[1., 0.])).unwrap();
        assert_abs_diff_eq!(s.parallel[0], 0.36, epsilon = 1e-15);
        assert_abs_diff_eq!(s.parallel[1], 0.48, epsilon = 1e-15);
        assert_abs_diff_eq!(s.orthogonal[0], 0.64, epsilon = 1e-15);
        assert_abs_diff_eq!(s.orthogonal[1], -0.48, epsilon = 1e-15);
        assert_eq!(s.base_norm_sq, 25.0);

        let s = decompose_orthogonal(&rv(&[1., 0.]), &rv(&[0., 7.])).unwrap();
        assert_eq!(s.parallel.as_slice(), &[0.0, 0.0]);
        assert_eq!(s.orthogonal.as_slice(), &[0.0, 7.0]);

        let s = decompose_orthogonal(&rv(&[2., 2.]), &rv(&[4., 4.])).unwrap();
        assert_eq!(s.parallel.as_slice(), &[4.0, 4.0]);
        assert_eq!(s.orthogonal.as_slice(), &[0.0, 0.0]);
        assert_eq!(s.coefficient(&rv(&[2., 2.])), 2.0);

        assert!(matches!(
            decompose_orthogonal(&rv(&[0., 0.]), &rv(&[1., 0.])),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn relative_orthogonal_examples() {
        assert_abs_diff_eq!(
            relative_orthogonal_magnitude(&rv(&[1., 0.]), &rv(&[0., 0.2])).unwrap(),
            0.04,
            epsilon = 1e-15
        );
        assert_eq!(
            relative_orthogonal_magnitude(&rv(&[1., 2.]), &rv(&[-3., -6.])).unwrap(),
            0.0
        );
        assert_eq!(
            relative_orthogonal_magnitude(&rv(&[1., 2., 3.]), &rv(&[0., 0., 0.])).unwrap(),
            0.0
        );
    }

    #[test]
    fn moments_examples() {
        let m = weighted_moments(&rv(&[2.5; 4]), &[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(m.variance, 0.0);

        let m = weighted_moments(&rv(&[0.2, 0.0]), &[0.5, 0.5]).unwrap();
        assert_abs_diff_eq!(m.mean, 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(m.variance, 0.01, epsilon = 1e-15);
        assert_abs_diff_eq!(
            m.second_moment - m.mean * m.mean,
            m.variance,
            epsilon = 1e-15
        );

        let m = weighted_moments(&rv(&[4.0, -1.0, 9.0]), &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(m.mean, -1.0);
        assert_eq!(m.variance, 0.0);
    }

    #[test]
    fn moments_reject_bad_weights() {
        assert!(matches!(
            weighted_moments(&rv(&[1., 2.]), &[1.5, -0.5]),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            weighted_moments(&rv(&[1., 2.]), &[0.5, 0.6]),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            weighted_moments(&rv(&[1., 2.]), &[1.0]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn clamp_only_touches_small_negatives() {
        assert_eq!(clamp_variance(-1e-13), 0.0);
        assert_eq!(clamp_variance(-1e-6), -1e-6);
        assert_eq!(clamp_variance(0.5), 0.5);
    }

    #[test]
    fn compensated_sum_beats_naive_on_long_input() {
        let mut xs = vec![1e16];
        xs.extend(std::iter::repeat_n(1.0, 2000));
        xs.push(-1e16);
        assert_eq!(sum(&xs), 2000.0);
    }

    fn vec_pair(dim: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (
            prop::collection::vec(-100.0..100.0_f64, dim),
            prop::collection::vec(-100.0..100.0_f64, dim),
        )
    }

    proptest! {
        #[test]
        fn split_reconstructs_and_is_orthogonal((b, d) in (1usize..40).prop_flat_map(vec_pair)) {
            let base = RealVector::new(b).unwrap();
            prop_assume!(base.norm() > 1e-3);
            let delta = RealVector::new(d).unwrap();
            let s = decompose_orthogonal(&base, &delta).unwrap();
            for i in 0..delta.dim() {
                let r = s.parallel[i] + s.orthogonal[i];
                prop_assert!((r - delta[i]).abs() <= 1e-12 * delta.max_abs().max(s.parallel.max_abs()) + 1e-300);
            }
            let ortho = base.dot(&s.orthogonal).unwrap().abs();
            prop_assert!(ortho <= 1e-10 * base.norm() * delta.norm() + 1e-300);
            let lhs = delta.norm_sq();
            let rhs = s.parallel.norm_sq() + s.orthogonal.norm_sq();
            prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.max(1e-300));
        }

        #[test]
        fn angular_is_symmetric_and_scale_invariant(
            (a, b) in (2usize..20).prop_flat_map(vec_pair),
            sa in 0.01..100.0_f64,
            sb in 0.01..100.0_f64,
        ) {
            let a = RealVector::new(a).unwrap();
            let b = RealVector::new(b).unwrap();
            prop_assume!(a.norm() > 1e-3 && b.norm() > 1e-3);
            let ab = angular_deviation(&a, &b).unwrap();
            prop_assert!((ab - angular_deviation(&b, &a).unwrap()).abs() <= 1e-15);
            let scaled = angular_deviation(&a.scale(sa).unwrap(), &b.scale(sb).unwrap()).unwrap();
            prop_assert!((ab - scaled).abs() <= 1e-13);
        }

        #[test]
        fn variance_is_shift_invariant(
            raw in prop::collection::vec((-10.0..10.0_f64, 0.0..1.0_f64), 1..50),
            shift in -1000.0..1000.0_f64,
        ) {
            let total: f64 = raw.iter().map(|(_, w)| w).sum();
            prop_assume!(total > 1e-6);
            let weights: Vec<f64> = raw.iter().map(|(_, w)| w / total).collect();
            let values = RealVector::new(raw.iter().map(|(v, _)| *v).collect()).unwrap();
            let shifted = RealVector::new(values.iter().map(|v| v + shift).collect()).unwrap();
            let a = weighted_moments(&values, &weights).unwrap().variance;
            let b = weighted_moments(&shifted, &weights).unwrap().variance;
            prop_assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
        }
    }
}
