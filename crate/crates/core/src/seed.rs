//! Deterministic derivation of independent seeds from a base seed.

/// Seed of sub-stream `stream` of `seed` (one splitmix64 step).
pub fn derive(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream tags keep the different consumers of a run seed apart.
pub const STREAM_SHUFFLE: u64 = 1 << 32;
pub const STREAM_SAMPLER: u64 = 2 << 32;
pub const STREAM_PATCH: u64 = 3 << 32;
pub const STREAM_SPLIT: u64 = 4 << 32;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_differ() {
        assert_ne!(derive(0, 0), derive(0, 1));
        assert_ne!(derive(0, 0), derive(1, 0));
        assert_eq!(derive(5, 9), derive(5, 9));
    }
}
