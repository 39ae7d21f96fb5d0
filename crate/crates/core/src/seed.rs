//! Seed derivation. Every random stream in the simulator is keyed by a tuple of
//! integers so that results do not depend on execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Stream tags keep independent consumers of the same (seed, round, client) apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Participants = 2,
    Clusters = 3,
    ClientTrain = 4,
    Toa = 5,
    Qsgd = 6,
    RandomFreeze = 7,
    Partition = 8,
    Holdout = 9,
    Synth = 10,
    Diagnostics = 11,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, stream: Stream, parts: &[u64]) -> u64 {
    let mut h = splitmix(seed ^ splitmix(stream as u64));
    for &p in parts {
        h = splitmix(h ^ splitmix(p.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    h
}

pub fn rng(seed: u64, stream: Stream, parts: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive(seed, stream, parts))
}
