//! Inputs shared by the benchmarks.

use bxl1_core::{rng, ThreatModel};
use rand::Rng;
use rand_distr::StandardNormal;

/// Uniform anchor in `[0, 1]^d` and a unit Gaussian perturbation of it.
pub fn instance(d: usize, eps: f64, seed: u64) -> (ThreatModel, Vec<f64>) {
    let mut r = rng::seeded(seed);
    let x: Vec<f64> = (0..d).map(|_| r.random::<f64>()).collect();
    let u = x
        .iter()
        .map(|v| v + r.sample::<f64, _>(StandardNormal))
        .collect();
    (ThreatModel::new(x, eps).expect("anchor in box"), u)
}

/// Standard normal vector, used as a gradient.
pub fn gradient(d: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::seeded(seed);
    (0..d).map(|_| r.sample(StandardNormal)).collect()
}
