//! Named, indexed random substreams derived from one master seed.
//!
//! Every consumer of randomness (an operator's choice draw, its coin flips,
//! its cipher nonce, the scheduler) gets its own ChaCha20 stream keyed by
//! `SHA-256(master || label || index)`. Two code paths that ask for the same
//! `(label, index)` see the same bits regardless of what else ran before.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

pub mod streams {
    pub const TRUE_CHOICE: &str = "true-choice";
    pub const RANDOMIZE: &str = "randomize";
    pub const CIPHER_NONCE: &str = "cipher-nonce";
    pub const ADDRESS: &str = "address";
    pub const PROFILE: &str = "profile";
    pub const SURVEY_KEYS: &str = "survey-keys";
    pub const SCHEDULE: &str = "schedule";
    pub const TRIAL: &str = "trial";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    master: u64,
}

impl SeedTree {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    fn key(&self, label: &str, index: u64) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.master.to_be_bytes());
        h.update((label.len() as u32).to_be_bytes());
        h.update(label.as_bytes());
        h.update(index.to_be_bytes());
        h.finalize().into()
    }

    pub fn stream(&self, label: &str, index: u64) -> ChaCha20Rng {
        ChaCha20Rng::from_seed(self.key(label, index))
    }

    /// A child tree, e.g. one per trial.
    pub fn child(&self, label: &str, index: u64) -> SeedTree {
        let k = self.key(label, index);
        SeedTree::new(u64::from_be_bytes(k[..8].try_into().unwrap()))
    }
}
