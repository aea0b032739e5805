//! Seeded Gaussian noise. Box-Muller on top of a counter-based RNG keeps the
//! draws bit-reproducible across platforms and dependency upgrades.

use nalgebra::DVector;
use rand::{Rng, RngExt};

/// One standard-normal draw.
pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    // avoid ln(0)
    let u1: f64 = loop {
        let u: f64 = rng.random();
        if u > 1e-300 {
            break u;
        }
    };
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Vector of iid `N(0, std^2)` draws.
pub fn gaussian_vector(rng: &mut impl Rng, len: usize, std: f64) -> DVector<f64> {
    DVector::from_fn(len, |_, _| std * standard_normal(rng))
}
