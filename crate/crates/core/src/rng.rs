//! Seed derivation. Every random stream in a run is keyed off one base seed
//! plus a stream name and optional integer coordinates, so per-sample draws
//! do not depend on execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named sub-streams of the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data,
    Init,
    Dropout,
    Shuffle,
    Split,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Data => 0x6461_7461,
            Stream::Init => 0x696e_6974,
            Stream::Dropout => 0x6472_6f70,
            Stream::Shuffle => 0x7368_7566,
            Stream::Split => 0x7370_6c74,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: Stream, coords: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ splitmix64(stream.tag()));
    for &c in coords {
        h = splitmix64(h ^ splitmix64(c.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    h
}

pub fn stream(seed: u64, stream: Stream, coords: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, coords))
}
