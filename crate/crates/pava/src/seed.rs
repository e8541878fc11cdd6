//! Seed derivation. Every random decision in the pipeline draws from a
//! generator seeded by mixing the run seed with the decision's coordinates
//! (epoch, batch, slot, ...), so results do not depend on execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, coords: &[u64]) -> u64 {
    coords
        .iter()
        .fold(splitmix64(base), |acc, &c| splitmix64(acc ^ splitmix64(c)))
}

pub fn rng(base: u64, coords: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(base, coords))
}

// Stream tags keep different consumers of one run seed apart.
pub(crate) const STREAM_INIT: u64 = 1;
pub(crate) const STREAM_BATCHES: u64 = 2;
pub(crate) const STREAM_SAMPLE: u64 = 3;
pub(crate) const STREAM_FLIP: u64 = 4;
pub(crate) const STREAM_EVAL: u64 = 5;
pub(crate) const STREAM_SYNTH: u64 = 6;
pub(crate) const STREAM_SPLIT: u64 = 7;
