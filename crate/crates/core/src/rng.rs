//! Seeded random streams.
//!
//! Every stochastic decision draws from a xoshiro256++ generator whose state
//! is expanded from a 64-bit key by SplitMix64. The key mixes the run seed,
//! a purpose tag and an index (fold, patient, ...) so that streams never
//! overlap and adding a consumer to one purpose leaves the others untouched.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Splits,
    Synth,
    Init,
    Dropout,
    Shuffle,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Splits => 0x5350_4c49_5453,
            Stream::Synth => 0x0053_594e_5448,
            Stream::Init => 0x494e_4954,
            Stream::Dropout => 0x4452_4f50,
            Stream::Shuffle => 0x5348_5546,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for `(seed, purpose, index)`.
pub fn stream(seed: u64, purpose: Stream, index: u64) -> Rng {
    let key = splitmix(splitmix(seed ^ purpose.tag()) ^ index);
    Rng::seed_from_u64(key)
}
