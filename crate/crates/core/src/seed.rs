//! Root-seed splitting.
//!
//! Every random stream in the pipeline is derived from one root seed and a
//! component label through a counter-based mix, so adding a new consumer never
//! perturbs the streams of existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive the seed for `(component, counter)` from `root`.
pub fn derive_seed(root: u64, component: &str, counter: u64) -> u64 {
    splitmix64(splitmix64(root ^ fnv1a(component)).wrapping_add(counter))
}

pub fn component_rng(root: u64, component: &str, counter: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, component, counter))
}
