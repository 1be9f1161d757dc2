//! Seeded synthetic generators for covariate-shift experiments.
//!
//! Every generator returns a fully labeled all-source dataset whose first
//! column `u ~ U(0, 1)` drives the shift; apply
//! [`simulate_shift`](crate::tabular::simulate_shift) with `shift_column = 0`
//! to split it into source and target.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::Result;
use crate::glm::sigmoid;
use crate::rng;
use crate::tabular::Dataset;

/// Number of covariates produced by the shifted generators.
pub const SHIFT_FEATURES: usize = 5;

fn names(f: usize) -> Vec<String> {
    std::iter::once("u".to_string()).chain((2..=f).map(|j| format!("x{j}"))).collect()
}

/// `u ~ U(0,1)` and four covariates `x_j = u + N(0, sd^2)`, so every column
/// is shifted along with `u`.
fn shifted_covariates(n: usize, sd: f64, r: &mut impl Rng) -> Array2<f64> {
    let noise = Normal::new(0.0, sd).expect("valid normal");
    let mut x = Array2::zeros((n, SHIFT_FEATURES));
    for i in 0..n {
        let u: f64 = r.random();
        x[[i, 0]] = u;
        for j in 1..SHIFT_FEATURES {
            x[[i, j]] = u + noise.sample(r);
        }
    }
    x
}

fn labeled(x: Array2<f64>, y: Vec<f64>) -> Result<Dataset> {
    let n = y.len();
    let f = x.ncols();
    Dataset::new(x, Some(y.into_iter().map(Some).collect()), vec![true; n], names(f))
}

/// Identically distributed domains: standard normal covariates, a linear
/// response with unit noise, and a fair-coin domain indicator.
pub fn no_shift(n: usize, n_features: usize, seed: u64) -> Result<Dataset> {
    let mut r = rng::seeded(seed);
    let mut x = Array2::zeros((n, n_features));
    let mut y = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    for i in 0..n {
        let mut m = 0.0;
        for j in 0..n_features {
            let v: f64 = StandardNormal.sample(&mut r);
            x[[i, j]] = v;
            m += 0.5 * v;
        }
        let e: f64 = StandardNormal.sample(&mut r);
        y.push(m + e);
        s.push(r.random::<bool>());
    }
    let d = labeled(x, y)?;
    d.with_indicator(s)
}

/// `y = sin(2 pi u) + 0.25 (x2 - x3) + N(0, 0.2^2)`.
pub fn regression(n: usize, seed: u64) -> Result<Dataset> {
    let mut r = rng::seeded(seed);
    let x = shifted_covariates(n, 0.3, &mut r);
    let noise = Normal::new(0.0, 0.2).expect("valid normal");
    let y = (0..n)
        .map(|i| {
            (2.0 * std::f64::consts::PI * x[[i, 0]]).sin() + 0.25 * (x[[i, 1]] - x[[i, 2]]) + noise.sample(&mut r)
        })
        .collect();
    labeled(x, y)
}

/// Binary labels with `logit P(y = 1) = [4 (2u - 1)(x2 - u) + (x3 - u)] / 0.3`;
/// the sign of the `x2` effect flips across `u`.
pub fn classification(n: usize, seed: u64) -> Result<Dataset> {
    let mut r = rng::seeded(seed);
    let x = shifted_covariates(n, 0.3, &mut r);
    let y = (0..n)
        .map(|i| {
            let u = x[[i, 0]];
            let eta = 4.0 * (2.0 * u - 1.0) * (x[[i, 1]] - u) / 0.3 + (x[[i, 2]] - u) / 0.3;
            f64::from(r.random::<f64>() < sigmoid(eta))
        })
        .collect();
    labeled(x, y)
}

/// Five informative covariates (`x_j = u + N(0, 0.15^2)`) followed by
/// `n_noise` standard normal ones, with a heteroscedastic response
/// `z ~ N(0.2 + 0.6 u^2 + 0.1 (x2 - u), (0.02 + 0.08 u)^2)`.
pub fn density(n: usize, n_noise: usize, seed: u64) -> Result<Dataset> {
    let mut r = rng::seeded(seed);
    let x = shifted_covariates(n, 0.15, &mut r);
    let y = (0..n)
        .map(|i| {
            let u = x[[i, 0]];
            let m = 0.2 + 0.6 * u * u + 0.1 * (x[[i, 1]] - u);
            let e: f64 = StandardNormal.sample(&mut r);
            m + (0.02 + 0.08 * u) * e
        })
        .collect();
    labeled(x, y)?.with_noise_covariates(n_noise, rng::derive_seed(seed, 1))
}
