//! Named, reproducible random substreams derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Derive a 64-bit seed for the substream `name` of `root`.
pub fn derive_seed(root: u64, name: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// RNG for substream `name` of `root`.
pub fn substream(root: u64, name: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(root, name))
}

/// RNG for item `index` of substream `name`, e.g. one bootstrap resample.
pub fn indexed(root: u64, name: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(derive_seed(root, name), &index.to_string()))
}
