//! Seeded randomness shared by initialisers and data synthesis.
//!
//! The generator is ChaCha8 seeded from a `u64`; normal deviates use the
//! Box-Muller transform so that streams are reproducible across platforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform draw in `[0, 1)`.
pub fn uniform(rng: &mut SeededRng) -> f64 {
    rng.random::<f64>()
}

/// One standard normal deviate (Box-Muller, cosine branch).
pub fn standard_normal(rng: &mut SeededRng) -> f64 {
    // 1 - u keeps the log argument in (0, 1]
    let u1 = 1.0 - rng.random::<f64>();
    let u2 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
