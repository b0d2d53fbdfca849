//! Hierarchical seed derivation.
//!
//! Every random stream in a run is keyed by a path such as
//! `run -> "epoch" 3 -> "attack" 17`. Adding streams or repeats never shifts
//! the values drawn by existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `parent`, a stream label and an index.
pub fn derive_seed(parent: u64, label: &str, index: u64) -> u64 {
    // FNV-1a over the label keeps distinct labels apart.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(splitmix64(parent ^ h).wrapping_add(index))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn derive_rng(parent: u64, label: &str, index: u64) -> Rng {
    rng_from_seed(derive_seed(parent, label, index))
}
