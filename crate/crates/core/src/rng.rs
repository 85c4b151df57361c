//! Seeded random streams.
//!
//! Every random draw in the pipeline comes from a ChaCha stream keyed by a
//! `(seed, stream)` pair, so independent consumers (one per class, one per
//! epoch) never perturb each other.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn keyed(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
