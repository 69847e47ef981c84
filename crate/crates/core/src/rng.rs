//! Named, seed-derived random streams.
//!
//! Every random draw in the crate comes from a [`ChaCha8Rng`] derived from a
//! root seed, a stream name and an index, so components (generation, proposal
//! sampling, initialisation, shuffling) can be varied independently.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// SplitMix64 finaliser.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Seed for stream `name` at position `index` under `root`.
pub fn derive_seed(root: u64, name: &str, index: u64) -> u64 {
    mix64(mix64(root ^ fnv1a(name)).wrapping_add(mix64(index)))
}

pub fn stream(root: u64, name: &str, index: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, name, index))
}
