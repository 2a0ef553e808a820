//! Stateless derivation of seeded random streams.
//!
//! Every random draw in a run comes from a generator keyed by
//! `(seed, stream, epoch, step)`, so resuming from a checkpoint needs no
//! generator state and runs are reproducible bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent purposes that consume randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Transform = 2,
    LatentShift = 3,
    Shuffle = 4,
    GanBatch = 5,
    GanNoise = 6,
    Synthetic = 7,
    Weights = 8,
}

#[inline]
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Generator for one `(stream, epoch, step)` cell of a seeded run.
pub fn stream_rng(seed: u64, stream: Stream, epoch: u64, step: u64) -> ChaCha8Rng {
    let mut h = splitmix64(seed);
    for word in [stream as u64, epoch, step] {
        h = splitmix64(h ^ word);
    }
    ChaCha8Rng::seed_from_u64(h)
}
