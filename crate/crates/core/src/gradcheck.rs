//! Central finite-difference gradient checking (64-bit mode).
//!
//! These helpers are the oracle the analytic backward passes are tested
//! against. They only ever call forward code.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so exact zeros compare cleanly.
const REL_FLOOR: f64 = 1e-8;

/// Uniform(-1, 1) tensor from a fixed seed.
pub fn random_tensor<T: Scalar>(shape: Shape, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| T::lit(rng.gen_range(-1.0..1.0)))
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central-difference estimate of `d loss / d x` for every element of `x`.
pub fn numeric_gradient(x: &Tensor<f64>, loss: impl Fn(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let up = loss(&probe);
        probe.data_mut()[i] = orig - FD_STEP;
        let down = loss(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * FD_STEP);
    }
    grad
}

/// Max relative error between an analytic gradient and central differences.
pub fn check_gradient(
    x: &Tensor<f64>,
    loss: impl Fn(&Tensor<f64>) -> f64,
    analytic: impl FnOnce(&Tensor<f64>) -> Tensor<f64>,
) -> f64 {
    let a = analytic(x);
    assert_eq!(a.shape(), x.shape(), "analytic gradient shape");
    let n = numeric_gradient(x, loss);
    max_relative_error(&a, &n)
}

pub fn max_relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}
