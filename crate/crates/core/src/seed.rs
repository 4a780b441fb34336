//! Deterministic derivation of independent seeds from structured indices.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds `parts` into one well-mixed seed; order matters.
pub fn derive(parts: &[u64]) -> u64 {
    parts.iter().fold(GOLDEN, |acc, &p| mix(acc.wrapping_add(GOLDEN) ^ mix(p)))
}

/// Stream tags keep seeds for different purposes apart.
pub mod stream {
    pub const TASK: u64 = 1;
    pub const SAMPLE: u64 = 2;
    pub const SELECT: u64 = 3;
    pub const INIT: u64 = 4;
    pub const EVAL: u64 = 5;
}
