//! Deterministic derivation of child seeds from a root seed and indices.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes a sequence of integers into one seed. Order matters.
pub fn derive(parts: &[u64]) -> u64 {
    parts.iter().fold(GOLDEN, |acc, &p| splitmix(acc ^ splitmix(p)))
}
