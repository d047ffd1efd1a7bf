//! Counter-based keyed value generation.
//!
//! Every synthetic matrix entry is a pure function of
//! (seed, block path, factor tag, row, col). Rank-local shard generation
//! therefore produces entries bitwise identical to a sequential build of
//! the full matrix, with no coordination and no stream state.

/// Factor being generated within a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Factor {
    Dense,
    U,
    V,
}

impl Factor {
    fn tag(self) -> u64 {
        match self {
            Factor::Dense => 0x44,
            Factor::U => 0x55,
            Factor::V => 0x56,
        }
    }
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// splitmix64 finalizer; full-period bijective mix.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Map a u64 to a double uniform in [-1, 1].
#[inline]
fn to_unit(h: u64) -> f64 {
    // 53 mantissa bits -> [0, 1), then affine to [-1, 1).
    ((h >> 11) as f64) * (2.0 / (1u64 << 53) as f64) - 1.0
}

/// Key identifying one block of the matrix, folded from the seed and the
/// block path of (target-child, source-child) steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockKey(u64);

impl BlockKey {
    pub fn new(seed: u64, path: &[(u8, u8)]) -> Self {
        let mut h = mix64(seed ^ GOLDEN);
        for &(t, s) in path {
            h = mix64(h ^ (0x100 | (u64::from(t) << 4) | u64::from(s)));
        }
        BlockKey(h)
    }

    /// One matrix entry, uniform in [-1, 1].
    #[inline]
    pub fn entry(self, factor: Factor, row: usize, col: usize) -> f64 {
        let h = mix64(self.0 ^ factor.tag());
        let h = mix64(h ^ row as u64);
        let h = mix64(h ^ (col as u64).wrapping_add(GOLDEN));
        to_unit(h)
    }
}

/// Element `i` of the `trial`-th random input vector for a given seed.
#[inline]
pub fn vector_entry(seed: u64, trial: u64, i: usize) -> f64 {
    let h = mix64(seed ^ GOLDEN ^ 0x7665_6374_6f72); // "vector"
    let h = mix64(h ^ trial);
    let h = mix64(h ^ i as u64);
    to_unit(h)
}
