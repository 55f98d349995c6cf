//! Shared fixtures for the crate's test suites. Compiled only for tests.

use nalgebra::{DMatrix, DVector};

use crate::quadratic_model::{Homotopy, QuadraticLogDensity};
use crate::rng::CounterRng;

/// Scalar prior N(0,1) with measurement H = R = z = 1. Posterior N(0.5, 0.5).
pub fn canonical_1d() -> Homotopy {
    let prior = QuadraticLogDensity::gaussian_prior(
        &DVector::from_vec(vec![0.0]),
        &DMatrix::from_vec(1, 1, vec![1.0]),
    )
    .unwrap();
    let lik = QuadraticLogDensity::linear_gaussian_measurement(
        &DMatrix::from_vec(1, 1, vec![1.0]),
        &DMatrix::from_vec(1, 1, vec![1.0]),
        &DVector::from_vec(vec![1.0]),
    )
    .unwrap();
    Homotopy::new(prior, lik).unwrap()
}

/// 2D prior N(0, I) with a rank-one measurement of the first coordinate
/// (H = [1 0], R = 1, z = 1). Posterior mean [0.5, 0], covariance diag(0.5, 1).
pub fn partial_2d() -> Homotopy {
    let prior =
        QuadraticLogDensity::gaussian_prior(&DVector::zeros(2), &DMatrix::identity(2, 2)).unwrap();
    let lik = QuadraticLogDensity::linear_gaussian_measurement(
        &DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        &DMatrix::from_vec(1, 1, vec![1.0]),
        &DVector::from_vec(vec![1.0]),
    )
    .unwrap();
    Homotopy::new(prior, lik).unwrap()
}

/// Scalar prior N(0,1) with a zero-curvature (exponential-type) likelihood
/// `log h = 0.7·x`. Posterior N(0.7, 1).
pub fn exponential_1d() -> Homotopy {
    let prior = QuadraticLogDensity::gaussian_prior(
        &DVector::from_vec(vec![0.0]),
        &DMatrix::from_vec(1, 1, vec![1.0]),
    )
    .unwrap();
    let lik = QuadraticLogDensity::new(
        DMatrix::from_vec(1, 1, vec![0.0]),
        DVector::from_vec(vec![0.7]),
        0.0,
    )
    .unwrap();
    Homotopy::new(prior, lik).unwrap()
}

/// Random symmetric positive definite matrix `G Gᵀ + 0.1 I`.
pub fn random_spd(rng: &mut CounterRng, n: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.normal());
    &g * g.transpose() + 0.1 * DMatrix::identity(n, n)
}

pub fn random_vector(rng: &mut CounterRng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.normal())
}
