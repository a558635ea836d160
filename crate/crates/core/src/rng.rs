//! Deterministic per-replication random streams.
//!
//! Every replication gets its own ChaCha stream derived from `(seed, replication)`, so
//! results never depend on execution order or the number of workers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

pub fn stream(seed: u64, index: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Standard logistic draw by inversion.
pub fn logistic<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.random_range(f64::EPSILON..1.0);
    (u / (1.0 - u)).ln()
}
