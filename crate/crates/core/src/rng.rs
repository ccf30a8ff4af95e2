//! Seed derivation. Every random stream in a run is derived from one root
//! seed plus a label, so modules never share or race on a generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Derives a child seed from `root` and a label path.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
}

/// Derives a child seed from `root`, a label and an index.
pub fn derive_indexed(root: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
}

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rng_for(root: u64, label: &str) -> Rng {
    rng_from(derive_seed(root, label))
}

pub fn normals(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn derived_seeds_are_stable_and_label_sensitive() {
        assert_eq!(derive_seed(7, "masknet"), derive_seed(7, "masknet"));
        assert_ne!(derive_seed(7, "masknet"), derive_seed(7, "datagen"));
        assert_ne!(derive_seed(7, "masknet"), derive_seed(8, "masknet"));
        assert_ne!(derive_indexed(7, "task", 0), derive_indexed(7, "task", 1));
    }

    #[test]
    fn streams_replay() {
        let a: Vec<u32> = (0..8).map(|_| rng_for(3, "x").gen()).collect();
        let b: Vec<u32> = (0..8).map(|_| rng_for(3, "x").gen()).collect();
        assert_eq!(a, b);
    }
}
