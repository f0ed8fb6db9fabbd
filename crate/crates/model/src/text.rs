//! Text backends: token-level embeddings standing in for a pretrained
//! language model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

pub trait TextBackend: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    /// One vector of length `dim()` per token; empty text yields none.
    fn embed(&self, text: &str) -> Result<Vec<Vec<f64>>, String>;
}

/// Deterministic stub: whitespace tokens, lower-cased, each mapped to a
/// fixed Gaussian vector seeded by the token's SHA-256.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashingTextBackend {
    pub dim: usize,
}

impl HashingTextBackend {
    pub fn new(dim: usize) -> Self {
        HashingTextBackend { dim }
    }

    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let digest = Sha256::digest(token.as_bytes());
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        let dist = Normal::new(0.0, 1.0 / (self.dim as f64).sqrt()).expect("finite std");
        (0..self.dim).map(|_| dist.sample(&mut rng)).collect()
    }
}

impl TextBackend for HashingTextBackend {
    fn name(&self) -> &str {
        "hashing-stub"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<Vec<f64>>, String> {
        Ok(text
            .split_whitespace()
            .map(|t| self.token_vector(&t.to_lowercase()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_tokens_deterministic() {
        let b = HashingTextBackend::new(16);
        let a = b.embed("hello world").unwrap();
        assert_eq!(a.len(), 2);
        assert!(a.iter().all(|v| v.len() == 16));
        assert_eq!(a, b.embed("Hello   WORLD").unwrap());
        assert_ne!(a[0], a[1]);
        assert!(b.embed("").unwrap().is_empty());
    }
}
