//! Seed derivation. Every module seed is `H(global_seed, module_name)` where
//! `H` is the first eight bytes (little-endian) of SHA-256 over the global
//! seed's little-endian bytes followed by the UTF-8 module name. This mapping
//! is part of the on-disk reproducibility contract and must not change.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn derive_seed(global_seed: u64, module: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(global_seed.to_le_bytes());
    hasher.update(module.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` of the generator seeded by `seed`. Streams
/// never overlap, so workers may draw from them in any interleaving.
pub fn stream_rng(seed: u64, stream: u64) -> Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn derivation_is_stable() {
        // Frozen: changing these values breaks reproducibility of old runs.
        assert_eq!(derive_seed(0, "sampler"), derive_seed(0, "sampler"));
        assert_ne!(derive_seed(0, "sampler"), derive_seed(0, "trainer"));
        assert_ne!(derive_seed(0, "sampler"), derive_seed(1, "sampler"));
        let golden = derive_seed(42, "sampler");
        let mut h = Sha256::new();
        h.update(42u64.to_le_bytes());
        h.update(b"sampler");
        let d = h.finalize();
        assert_eq!(golden, u64::from_le_bytes(d[..8].try_into().unwrap()));
    }

    #[test]
    fn streams_differ() {
        let a: u64 = stream_rng(7, 0).random();
        let b: u64 = stream_rng(7, 1).random();
        assert_ne!(a, b);
        let c: u64 = stream_rng(7, 0).random();
        assert_eq!(a, c);
    }
}
