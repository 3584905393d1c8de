//! Seeded ChaCha20 streams. Every random quantity comes from its own stream,
//! so results do not depend on evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Purpose {
    Field = 1,
    Geometry = 2,
}

/// ChaCha20 keyed by `seed`, on stream `(purpose << 32) | replicate`.
pub fn stream_rng(seed: u64, purpose: Purpose, replicate: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 32) | (replicate & 0xffff_ffff));
    rng
}
