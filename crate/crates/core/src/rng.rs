//! Seeded random streams.
//!
//! All randomness flows from one 64-bit seed through ChaCha8. Each consumer
//! draws from its own stream so that, for example, changing the shuffle
//! order never perturbs weight initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Split = 3,
    Synth = 4,
    SkipInit = 5,
    AttentionInit = 6,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}
