//! Seeded random substreams.
//!
//! Every random draw in the library comes from a stream keyed by
//! `(root seed, purpose, iteration, task)`. Two streams with different keys
//! are statistically independent, and a stream never depends on how many
//! draws other streams have made, so evaluating tasks in parallel or in
//! sequence yields the same numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator type handed out by [`substream`].
pub type StreamRng = ChaCha8Rng;

/// What a stream is used for. Part of the stream key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    Spsa,
    TaskOrder,
    GradientCheck,
    Lanczos,
    Init,
    Data,
    MiniBatch,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Spsa => 0x5350_5341,
            Purpose::TaskOrder => 0x4f52_4445,
            Purpose::GradientCheck => 0x4743_484b,
            Purpose::Lanczos => 0x4c41_4e43,
            Purpose::Init => 0x494e_4954,
            Purpose::Data => 0x4441_5441,
            Purpose::MiniBatch => 0x4d42_4154,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive the stream for `(root, purpose, iteration, task)`.
pub fn substream(root: u64, purpose: Purpose, iteration: u64, task: u64) -> StreamRng {
    let mut key = splitmix(root);
    for word in [purpose.tag(), iteration, task] {
        key = splitmix(key ^ word);
    }
    ChaCha8Rng::seed_from_u64(key)
}
