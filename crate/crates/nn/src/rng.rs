//! Deterministic RNG construction and seed splitting.
//!
//! Splitting rule: `(seed, stream)` yields a ChaCha8 RNG seeded with `seed`
//! on word-stream `stream`. Streams are independent, so parallel workers can
//! each take `stream = worker_index` without coordination.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn child(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
