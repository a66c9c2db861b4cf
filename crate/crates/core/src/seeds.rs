//! Deterministic derivation of independent RNG seeds from a base seed.

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the stream identified by `tags` under `base`.
pub fn derive(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix(base), |acc, &t| mix(acc ^ mix(t)))
}

pub const SHUFFLE: u64 = 1;
pub const MASK: u64 = 2;
pub const DROP_PATH: u64 = 3;
pub const STUDENT_INIT: u64 = 4;
pub const HEADS_INIT: u64 = 5;
pub const CLASSIFIER_HEAD: u64 = 6;
