//! Seed handling. Every random stream in the crate is a ChaCha8 generator
//! seeded from a `u64`; derived seeds mix a parent seed with a stream tag
//! through SplitMix64 so that sibling jobs never share a stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Name recorded in artifact metadata next to every seed.
pub const RNG_ALGORITHM: &str = "ChaCha8";

pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for job `tag` under `seed` (e.g. `seed ⊕ point_id`, whitened).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag))
}

/// Derived seed keyed by a string label.
pub fn derive_seed_str(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label bytes
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    derive_seed(seed, h)
}
