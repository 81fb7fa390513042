//! Portable seeded randomness.
//!
//! Xoshiro256++ seeded through SplitMix64, with Box–Muller normals, so that
//! data generation and initialization do not depend on the platform.

use rand::{Rng as _, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

pub fn seeded(seed: u64) -> Rng {
    // seed_from_u64 expands the seed with SplitMix64.
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

pub fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// One standard normal draw (Box–Muller, cosine branch).
pub fn standard_normal(rng: &mut Rng) -> f64 {
    // 1 - U keeps the log argument in (0, 1].
    let u1 = 1.0 - rng.random::<f64>();
    let u2 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Uniform integer in `0..n`.
pub fn index(rng: &mut Rng, n: usize) -> usize {
    rng.random_range(0..n)
}
