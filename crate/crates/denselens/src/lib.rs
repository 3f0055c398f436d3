//! denselens — measure where retrieval-relevant knowledge lives inside
//! transformer text encoders.
//!
//! The toolkit has two measurement arms:
//!
//! * **Layer-wise linear probing**: per-layer pooled embeddings of a query
//!   and N candidate passages are concatenated and fed to an N-way linear
//!   classifier; test accuracy per layer quantifies how much relevance
//!   discrimination each layer's representation carries.
//! * **Neuron attribution**: integrated gradients over each feed-forward
//!   neuron's weight vector (scaled from zero to its learned value) score
//!   how much each neuron contributes to the final pooled embedding;
//!   thresholded scores aggregated over a corpus show how fine-tuning
//!   redistributes neuron activations relative to the pretrained backbone.
//!
//! Supporting machinery: a dataset builder for retrieval corpora with hard
//! negatives, a deterministic embedding cache, paired significance testing
//! between a fine-tuned model and its backbone, and figure/CSV reporting.

pub mod attribution;
pub mod cache;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod model;
pub mod probe;
pub mod report;
pub mod stats;

pub use error::{Error, Result};

/// Hex-encoded SHA-256 of a text, the canonical cache key for embeddings.
pub fn text_hash(text: &str) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        use std::fmt::Write;
        let _ = write!(out, "{byte:02x}");
    }
    out
}

/// Derive a deterministic ChaCha8 RNG from a namespace, a base seed and a
/// per-item key. Namespacing keeps independent sampling decisions (negative
/// choice, positive placement, splits) on disjoint streams, and per-item
/// keys make record-level operations order-independent.
pub(crate) fn sub_rng(namespace: &str, seed: u64, key: &str) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(namespace.as_bytes());
    hasher.update(seed.to_le_bytes());
    hasher.update(key.as_bytes());
    let digest = hasher.finalize();
    let mut seed_bytes = [0u8; 32];
    seed_bytes.copy_from_slice(&digest);
    rand_chacha::ChaCha8Rng::from_seed(seed_bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_hash_is_stable_sha256() {
        // sha256("") and sha256("abc") are fixed reference values.
        assert_eq!(
            text_hash(""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(
            text_hash("abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn sub_rng_streams_are_independent_and_reproducible() {
        use rand::Rng;
        let mut a1 = sub_rng("ns", 42, "k");
        let mut a2 = sub_rng("ns", 42, "k");
        let mut b = sub_rng("ns", 42, "other");
        let xs1: Vec<u64> = (0..4).map(|_| a1.random()).collect();
        let xs2: Vec<u64> = (0..4).map(|_| a2.random()).collect();
        let ys: Vec<u64> = (0..4).map(|_| b.random()).collect();
        assert_eq!(xs1, xs2);
        assert_ne!(xs1, ys);
    }
}
