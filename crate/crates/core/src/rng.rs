//! Named, splittable random streams derived from one master seed.
//!
//! Every consumer (initialization, data, SIM) draws from its own stream, so
//! switching one consumer off never shifts another's sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seed of the stream `name` under `master`.
pub fn derive_seed(master: u64, name: &str) -> u64 {
    splitmix64(master ^ splitmix64(fnv1a(name.as_bytes())))
}

/// Seed keyed by an ordered list of integers, e.g. (sim_seed, block, step).
pub fn derive_keyed(seed: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix64(seed), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn stream(master: u64, name: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(master, name))
}

pub fn keyed(seed: u64, keys: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_keyed(seed, keys))
}

/// The three independent streams of a training run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedStreams {
    pub init: u64,
    pub data: u64,
    pub sim: u64,
}

impl SeedStreams {
    pub fn from_master(master: u64) -> Self {
        SeedStreams {
            init: derive_seed(master, "init"),
            data: derive_seed(master, "data"),
            sim: derive_seed(master, "sim"),
        }
    }
}
