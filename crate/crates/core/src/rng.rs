//! Seeded random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream derived from the
//! master seed, so parallel execution or reordering of independent stages
//! never changes what any stage samples.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named stream slots. Task streams are laid out after the fixed slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init,
    FineTune,
    Reference,
    /// Batches drawn inside the inner adaptation loop of task `i`.
    InnerBatch(usize),
    /// Fresh batches drawn for the meta-update of task `i`.
    MetaBatch(usize),
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Init => 0,
            Stream::FineTune => 1,
            Stream::Reference => 2,
            Stream::InnerBatch(i) => 16 + 2 * i as u64,
            Stream::MetaBatch(i) => 17 + 2 * i as u64,
        }
    }
}

pub fn stream(seed: u64, stream: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

/// Plain generator for a seed, used by data generation and injection.
pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Deterministically mixes a base seed with a salt (splitmix64 finalizer).
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
