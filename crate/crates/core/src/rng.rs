//! Seeded RNG helpers shared across modules.
//!
//! All randomness in the crate flows through `ChaCha8` streams seeded from
//! explicit integers, so every pipeline stage is reproducible bit-for-bit.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Standard normal draw via Box-Muller; keeps the draw sequence pinned by
/// this crate alone rather than a distribution crate's internals.
pub(crate) fn normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        if u1 > f64::MIN_POSITIVE {
            let u2: f64 = rng.gen::<f64>();
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

/// Mix a base seed with stream coordinates (splitmix64 finalizer). Used to
/// derive independent per-sample and per-epoch streams whose results do not
/// depend on scheduling order.
pub(crate) fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base ^ a.wrapping_mul(0x9E3779B97F4A7C15) ^ b.wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}
