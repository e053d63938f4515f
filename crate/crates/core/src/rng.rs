//! Seeded random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream derived from the
//! run seed, so adding or removing one consumer never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SslRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SslRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(seed: u64, stream: u64) -> SslRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Named stream ids used by the training loop.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const LABELED_BATCHES: u64 = 3;
    pub const UNLABELED_BATCHES: u64 = 4;
    pub const LOSS: u64 = 5;
    pub const NEGATIVES: u64 = 6;
    pub const MIXMATCH: u64 = 7;
}
