//! Seeded randomness shared across the whole crate.
//!
//! Every stochastic stage draws from a ChaCha8 stream seeded either
//! directly or via [`derive_seed`], which hashes (root seed, stage name)
//! so inserting a stage never shifts the randomness of the others.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// The one pseudo-random generator used repo-wide.
pub type SeededRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives a stage seed from a root seed and a stage label:
/// the first 8 little-endian bytes of
/// SHA-256("fairaudit.seed.v1" || root_le_bytes || label).
pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(b"fairaudit.seed.v1");
    hasher.update(root.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Seeded Fisher-Yates permutation of `0..n`.
pub fn shuffled_indices(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// Seeded sample of `k` distinct indices out of `0..n`.
pub fn sample_without_replacement(n: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    assert!(k <= n, "cannot sample {k} from {n}");
    let mut idx = shuffled_indices(n, rng);
    idx.truncate(k);
    idx
}
