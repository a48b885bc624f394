//! Noise calibration, clipping and gradient sanitization.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{contract, Result};

/// Gaussian-mechanism scale `L * C * sqrt(2 ln(1.25 / delta)) / epsilon`.
pub fn calibrate_sigma(epsilon: f64, delta: f64, clip: f64, n_layers: usize) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(contract(format!("epsilon must be positive, got {epsilon}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(contract(format!("delta must lie in (0, 1), got {delta}")));
    }
    if !(clip >= 0.0) {
        return Err(contract(format!(
            "clip bound must be non-negative, got {clip}"
        )));
    }
    Ok(n_layers as f64 * clip * (2.0 * (1.25 / delta).ln()).sqrt() / epsilon)
}

/// Clamps every coordinate into `[-c, c]`. Returns whether anything moved.
pub fn clip_coords(v: &mut [f64], c: f64) -> bool {
    let mut hit = false;
    for x in v {
        if x.abs() > c {
            *x = x.signum() * c;
            hit = true;
        }
    }
    hit
}

/// Rescales `g` onto the L2 ball of radius `c`. Returns the factor applied.
pub fn clip_norm(g: &mut [f64], c: f64) -> f64 {
    let n = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n <= c || n == 0.0 {
        return 1.0;
    }
    let k = c / n;
    g.iter_mut().for_each(|x| *x *= k);
    k
}

/// Adds `sigma * z` per coordinate. The standard normal draws happen even when
/// `sigma` is zero so every noise level consumes the stream identically.
pub fn add_gaussian(v: &mut [f64], sigma: f64, rng: &mut impl Rng) {
    for x in v {
        let z: f64 = rng.sample(StandardNormal);
        *x += sigma * z;
    }
}

/// Clip to `clip` in L2 (when given), then add `N(0, sigma^2)` per coordinate.
pub fn dpsgd_sanitize(grad: &[f64], clip: Option<f64>, sigma: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut g = grad.to_vec();
    if let Some(c) = clip {
        clip_norm(&mut g, c);
    }
    add_gaussian(&mut g, sigma, rng);
    g
}
