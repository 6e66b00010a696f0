//! Named, seed-derived random streams.
//!
//! Every consumer of randomness derives its own ChaCha stream from the run
//! seed plus a stream tag and an index (epoch, step, chain). Nothing depends
//! on generator state carried between calls, so resuming from a checkpoint
//! only needs the seed and the counters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Sub-stream tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Train = 3,
    Langevin = 4,
    Prior = 5,
    Split = 6,
    Shuffle = 7,
}

// splitmix64 finalizer
fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn derive_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    mix(mix(seed ^ mix(stream as u64)) ^ index)
}

pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, index))
}
