//! Counter-based RNG derivation: every consumer gets its own stream keyed by
//! `(seed, path...)`, so results never depend on iteration order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags used across the crate.
pub mod purpose {
    pub const INIT_DSUB: u64 = 1;
    pub const INIT_DAUX: u64 = 2;
    pub const INIT_ERED: u64 = 3;
    pub const INIT_SCAM: u64 = 4;
    pub const INIT_HEADS: u64 = 5;
    pub const SHUFFLE: u64 = 10;
    pub const AUGMENT: u64 = 11;
    pub const PAIRING: u64 = 12;
    pub const SYNTH_ASSIGN: u64 = 20;
    pub const SYNTH_IMAGE: u64 = 21;
    pub const SYNTH_FINGERPRINT: u64 = 22;
    pub const DISTURB: u64 = 30;
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, path: &[u64]) -> [u8; 32] {
    let mut state = splitmix64(seed);
    for &p in path {
        state = splitmix64(state ^ splitmix64(p.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    let mut out = [0u8; 32];
    for chunk in out.chunks_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    out
}

pub fn derive_rng(seed: u64, path: &[u64]) -> Rng {
    Rng::from_seed(derive_seed(seed, path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = derive_rng(7, &[1, 2]).random();
        let b: u64 = derive_rng(7, &[1, 2]).random();
        let c: u64 = derive_rng(7, &[2, 1]).random();
        let d: u64 = derive_rng(8, &[1, 2]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
