//! Seed derivation.
//!
//! Every random stream is derived from one root seed as
//! `derive_seed(root, stream, index)`, where `stream` is one of the
//! constants below and `index` distinguishes repeated uses within a stage
//! (a sentence index, an epoch, a run number). The mixer is SplitMix64, so
//! neighbouring counters give unrelated seeds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_FAMILY: u64 = 1;
pub const STREAM_CORPUS: u64 = 2;
pub const STREAM_TASKS: u64 = 3;
pub const STREAM_INIT: u64 = 4;
pub const STREAM_PRETRAIN: u64 = 5;
pub const STREAM_FINETUNE: u64 = 6;
pub const STREAM_MIXTURE: u64 = 7;
pub const STREAM_PROBES: u64 = 8;
pub const STREAM_PERMUTATION: u64 = 9;
pub const STREAM_DROPOUT: u64 = 10;
pub const STREAM_SHUFFLE: u64 = 11;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(root: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(root) ^ stream) ^ index)
}

pub fn rng_for(root: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, stream, index))
}
