//! Seeded random streams.
//!
//! Every stochastic consumer draws from its own ChaCha stream derived from the
//! run seed, a consumer tag and an index, so consumers never perturb each
//! other and results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum Stream {
    Init = 1,
    Epoch = 2,
    Validation = 3,
    Split = 4,
    Synth = 5,
    Pairs = 6,
    Probe = 7,
    Fixture = 8,
}

pub fn stream(seed: u64, tag: Stream, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((tag as u64) << 40) ^ index);
    rng
}
