//! Named, splittable random streams.
//!
//! Every stochastic site (parameter init, dropout, shuffling, search sampling)
//! draws from its own stream, derived from the run seed and a path of string
//! labels. Streams are independent: toggling dropout does not perturb
//! initialization, and adding a parameter does not shift the draws of another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// A derivation point in the stream tree. Cheap to clone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamKey {
    key: [u8; 32],
}

impl StreamKey {
    pub fn from_seed(seed: u64) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(b"relgnn-root");
        hasher.update(seed.to_le_bytes());
        StreamKey {
            key: hasher.finalize().into(),
        }
    }

    /// Derive a child stream by label.
    pub fn child(&self, label: &str) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(self.key);
        hasher.update([0x1f]); // separator, keeps "ab"/"c" distinct from "a"/"bc"
        hasher.update(label.as_bytes());
        StreamKey {
            key: hasher.finalize().into(),
        }
    }

    /// A counter-based generator for this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.key)
    }
}
