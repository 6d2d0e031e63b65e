//! Seed derivation. Every stochastic step owns a seed derived from the run
//! seed, a stream tag, and an index, so per-item content is independent of
//! generation order and safe to compute in parallel.

/// Stream tags keep independent uses of the same (seed, index) pair apart.
pub mod stream {
    pub const SCENE: u64 = 1;
    pub const SHIFT: u64 = 2;
    pub const STYLE: u64 = 3;
    pub const MIX: u64 = 4;
    pub const INIT: u64 = 5;
    pub const DRAW: u64 = 6;
    pub const ITER: u64 = 7;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent seed from a base seed, a stream tag, and an index.
#[inline]
pub fn derive(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ stream.wrapping_mul(0xA24B_AED4_963E_E407)) ^ index)
}
