//! Seeded random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream derived from the run
//! seed, so adding draws in one place never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::math;

pub type Rng = ChaCha8Rng;

/// Purpose tags for independent streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Env = 2,
    Action = 3,
    Replay = 4,
    Expert = 5,
    Fractions = 6,
    Eval = 7,
    Collect = 8,
}

/// A generator for `(seed, stream)`.
pub fn stream(seed: u64, purpose: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose as u64);
    rng
}

/// Box-Muller draw computed with `libm`, so the bits do not depend on which
/// float backend the rest of the dependency graph happens to enable.
pub fn standard_normal<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1 = 1.0 - rng.random::<f64>();
    let u2 = rng.random::<f64>();
    math::sqrt(-2.0 * math::ln(u1)) * math::cos(2.0 * core::f64::consts::PI * u2)
}

/// Uniform draw on `[lo, hi)`.
pub fn uniform<R: rand::Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}
