//! Seed derivation.
//!
//! Every source of randomness in a run is a separate stream derived from one
//! master seed, so that e.g. changing the number of stochastic passes does
//! not perturb mini-batch order. The mixing functions here are fixed and
//! platform independent; `std`'s hashers are not used because their output
//! is not guaranteed to be stable across releases.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named purposes for derived streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Split,
    Init,
    Dropout,
    TrainDropout,
    Shuffle,
    RandomScore,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Split => 0x0053_504c_4954,
            Stream::Init => 0x494e_4954,
            Stream::Dropout => 0x4452_4f50,
            Stream::TrainDropout => 0x5452_4452,
            Stream::Shuffle => 0x5348_5546,
            Stream::RandomScore => 0x5241_4e44,
        }
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer.
pub fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a sequence of words into one seed. Order sensitive.
pub fn mix(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(0x6a09_e667_f3bc_c908, |acc, &w| splitmix(acc ^ splitmix(w)))
}

pub fn derive(master: u64, stream: Stream, keys: &[u64]) -> u64 {
    let mut words = Vec::with_capacity(keys.len() + 2);
    words.push(master);
    words.push(stream.tag());
    words.extend_from_slice(keys);
    mix(&words)
}

pub fn stream_rng(master: u64, stream: Stream, keys: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, stream, keys))
}

/// Seed for one stochastic forward pass over one example.
pub fn pass_seed(net_seed: u64, round: u64, pass: u64, example_id: &str) -> u64 {
    derive(net_seed, Stream::Dropout, &[round, pass, fnv1a(example_id.as_bytes())])
}
