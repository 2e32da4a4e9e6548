//! Seed derivation. Every stochastic choice in the pipeline (epoch plans,
//! flips, dropout masks, weight init) draws from a generator seeded by mixing
//! a base seed with the coordinates of the draw, so no generator state has to
//! be carried between steps or saved in checkpoints.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `base` with an ordered list of coordinates into a new seed.
pub fn derive_seed(base: u64, coords: &[u64]) -> u64 {
    let mut h = splitmix(base.wrapping_add(GOLDEN));
    for &c in coords {
        h = splitmix(h ^ c.wrapping_add(GOLDEN).wrapping_mul(0xD6E8_FEB8_6659_FD93));
    }
    h
}

pub fn rng_for(base: u64, coords: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, coords))
}

// Stream tags keep the derived seeds of unrelated consumers apart.
pub(crate) const STREAM_PLAN: u64 = 1;
pub(crate) const STREAM_FLIP: u64 = 2;
pub(crate) const STREAM_DROPOUT: u64 = 3;
pub(crate) const STREAM_SPLIT: u64 = 4;
