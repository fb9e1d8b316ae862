#![allow(dead_code)]

use late_balance::balancer::logistic;
use late_balance::Dataset;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Gaussian covariates, logistic instrument, one-sided noncompliance mix.
pub fn random_dataset(seed: u64, n: usize, p: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut y = Vec::with_capacity(n);
    let mut d = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    for i in 0..n {
        let idx = if p > 0 { 0.6 * x[(i, 0)] } else { 0.0 };
        let zi = if rng.random::<f64>() < logistic(idx) { 1.0 } else { 0.0 };
        let u: f64 = rng.random();
        let di = if zi == 1.0 { (u < 0.8) as u8 as f64 } else { (u < 0.2) as u8 as f64 };
        let noise: f64 = rng.sample(StandardNormal);
        y.push(x.row(i).sum() + 2.0 * di + noise);
        d.push(di);
        z.push(zi);
    }
    Dataset::new(y, d, z, x).unwrap()
}

/// `X ~ U(0, 1)`, `Z ~ Bernoulli(L(a + b X))`.
pub fn logistic_instrument(seed: u64, n: usize, a: f64, b: f64) -> (DMatrix<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = DMatrix::zeros(n, 1);
    let mut z = Vec::with_capacity(n);
    for i in 0..n {
        let xi: f64 = rng.random();
        x[(i, 0)] = xi;
        z.push(if rng.random::<f64>() < logistic(a + b * xi) { 1.0 } else { 0.0 });
    }
    (x, z)
}
