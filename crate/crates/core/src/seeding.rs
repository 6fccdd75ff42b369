//! Deterministic seed derivation for independent RNG streams.

/// SplitMix64 finalizer; decorrelates nearby seeds.
pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Stable sub-seed for stream `(salt, index)` under a master seed.
pub(crate) fn derive_seed(master: u64, salt: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ salt.wrapping_mul(0xA076_1D64_78BD_642F)) ^ index)
}
