//! Per-layer hidden-state extraction and pooling.
//!
//! A loaded encoder turns a text into one hidden-state matrix per
//! transformer block; a pooling strategy reduces each matrix to a single
//! vector. Pooling respects the attention mask so padded positions never
//! leak into embeddings. Pooled vectors are persisted through the
//! [`crate::cache`] store keyed by `(model_id, pooling, text_hash)`.

use crate::cache::{CacheHeader, EmbeddingCache};
use crate::error::{Error, Result};
use crate::model::{tokenize, Architecture, Transformer};
use crate::text_hash;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

/// Sequence-to-vector reduction strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Leading classification-token state (encoder-only models).
    FirstToken,
    /// Mask-weighted mean over token states.
    Mean,
    /// State at the last mask-valid position (end-of-sequence token).
    LastToken,
}

impl Pooling {
    pub fn wire_tag(self) -> u8 {
        match self {
            Pooling::FirstToken => 0,
            Pooling::Mean => 1,
            Pooling::LastToken => 2,
        }
    }

    pub fn from_wire_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Pooling::FirstToken),
            1 => Ok(Pooling::Mean),
            2 => Ok(Pooling::LastToken),
            other => Err(Error::Storage(format!("unknown pooling tag {other}"))),
        }
    }
}

impl std::str::FromStr for Pooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first_token" => Ok(Pooling::FirstToken),
            "mean" => Ok(Pooling::Mean),
            "last_token" => Ok(Pooling::LastToken),
            other => Err(Error::Argument(format!(
                "unknown pooling {other:?} (expected first_token, mean or last_token)"
            ))),
        }
    }
}

impl std::fmt::Display for Pooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Pooling::FirstToken => write!(f, "first_token"),
            Pooling::Mean => write!(f, "mean"),
            Pooling::LastToken => write!(f, "last_token"),
        }
    }
}

/// Hidden states of every stored layer for one text.
#[derive(Debug, Clone)]
pub struct LayerHiddenStates {
    /// One `T x d` matrix per stored layer.
    pub layers: Vec<Array2<f64>>,
    pub token_count: usize,
    /// 1 for content positions, 0 for padding.
    pub attention_mask: Vec<u8>,
    pub architecture: Architecture,
}

impl LayerHiddenStates {
    pub fn new(
        layers: Vec<Array2<f64>>,
        attention_mask: Vec<u8>,
        architecture: Architecture,
    ) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::Argument("no hidden-state layers supplied".into()))?;
        let shape = first.dim();
        if layers.iter().any(|l| l.dim() != shape) {
            return Err(Error::Argument(
                "hidden-state layers have inconsistent shapes".into(),
            ));
        }
        if attention_mask.len() != shape.0 {
            return Err(Error::Argument(format!(
                "attention mask length {} does not match token count {}",
                attention_mask.len(),
                shape.0
            )));
        }
        Ok(Self {
            layers,
            token_count: shape.0,
            attention_mask,
            architecture,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers[0].ncols()
    }
}

/// Per-layer pooled embeddings for one text.
#[derive(Debug, Clone)]
pub struct LayerEmbeddings {
    pub vectors: Vec<Array1<f64>>,
    pub pooling: Pooling,
    pub text_hash: String,
}

impl LayerEmbeddings {
    pub fn new(vectors: Vec<Array1<f64>>, pooling: Pooling, text_hash: String) -> Result<Self> {
        if vectors
            .iter()
            .any(|v| v.iter().any(|x| !x.is_finite()))
        {
            return Err(Error::Numerical(format!(
                "pooled embedding for {text_hash} contains non-finite values"
            )));
        }
        Ok(Self {
            vectors,
            pooling,
            text_hash,
        })
    }

    /// Layer-major f32 flattening, the cache's storage precision.
    pub fn to_f32_flat(&self) -> Vec<f32> {
        self.vectors
            .iter()
            .flat_map(|v| v.iter().map(|&x| x as f32))
            .collect()
    }
}

/// Pool one hidden-state matrix down to a vector.
pub fn pool_rows(
    h: &Array2<f64>,
    mask: &[u8],
    pooling: Pooling,
    architecture: Architecture,
) -> Result<Array1<f64>> {
    match pooling {
        Pooling::FirstToken => {
            if architecture == Architecture::DecoderOnly {
                return Err(Error::PoolingMismatch(
                    "first_token pooling requires an encoder-only model (the first position \
                     is the classification token)"
                        .into(),
                ));
            }
            Ok(h.row(0).to_owned())
        }
        Pooling::Mean => {
            let valid: Vec<usize> = mask
                .iter()
                .enumerate()
                .filter(|(_, &m)| m != 0)
                .map(|(i, _)| i)
                .collect();
            if valid.is_empty() {
                return Err(Error::Argument(
                    "mean pooling over an all-zero attention mask".into(),
                ));
            }
            let mut sum = Array1::zeros(h.ncols());
            for &t in &valid {
                sum = sum + h.row(t);
            }
            Ok(sum / valid.len() as f64)
        }
        Pooling::LastToken => {
            let last = mask
                .iter()
                .rposition(|&m| m != 0)
                .ok_or_else(|| {
                    Error::Argument("last-token pooling over an all-zero attention mask".into())
                })?;
            Ok(h.row(last).to_owned())
        }
    }
}

/// First-token (classification-token) pooling over every layer.
pub fn pool_first_token(h: &LayerHiddenStates) -> Result<Vec<Array1<f64>>> {
    h.layers
        .iter()
        .map(|layer| pool_rows(layer, &h.attention_mask, Pooling::FirstToken, h.architecture))
        .collect()
}

/// Mask-aware mean pooling over every layer.
pub fn pool_mean(h: &LayerHiddenStates) -> Result<Vec<Array1<f64>>> {
    h.layers
        .iter()
        .map(|layer| pool_rows(layer, &h.attention_mask, Pooling::Mean, h.architecture))
        .collect()
}

/// Last mask-valid position pooling over every layer.
pub fn pool_last_token(h: &LayerHiddenStates) -> Result<Vec<Array1<f64>>> {
    h.layers
        .iter()
        .map(|layer| pool_rows(layer, &h.attention_mask, Pooling::LastToken, h.architecture))
        .collect()
}

/// Dispatch on a [`Pooling`] value.
pub fn pool(h: &LayerHiddenStates, pooling: Pooling) -> Result<Vec<Array1<f64>>> {
    match pooling {
        Pooling::FirstToken => pool_first_token(h),
        Pooling::Mean => pool_mean(h),
        Pooling::LastToken => pool_last_token(h),
    }
}

/// Adjoint of [`pool_rows`]: distribute a gradient seed on the pooled
/// vector back onto the `T x d` hidden-state matrix.
pub fn pooling_adjoint(
    token_count: usize,
    mask: &[u8],
    pooling: Pooling,
    seed: &Array1<f64>,
) -> Result<Array2<f64>> {
    let d = seed.len();
    let mut grad = Array2::zeros((token_count, d));
    match pooling {
        Pooling::FirstToken => grad.row_mut(0).assign(seed),
        Pooling::Mean => {
            let valid: Vec<usize> = mask
                .iter()
                .enumerate()
                .filter(|(_, &m)| m != 0)
                .map(|(i, _)| i)
                .collect();
            if valid.is_empty() {
                return Err(Error::Argument("all-zero attention mask".into()));
            }
            let scaled = seed / valid.len() as f64;
            for &t in &valid {
                grad.row_mut(t).assign(&scaled);
            }
        }
        Pooling::LastToken => {
            let last = mask
                .iter()
                .rposition(|&m| m != 0)
                .ok_or_else(|| Error::Argument("all-zero attention mask".into()))?;
            grad.row_mut(last).assign(seed);
        }
    }
    Ok(grad)
}

/// A loaded encoder plus extraction bookkeeping.
#[derive(Debug)]
pub struct EncoderHandle {
    model: Transformer,
    /// Store the embedding-table output as an extra leading layer.
    include_embedding_layer: bool,
    truncation_count: AtomicU64,
    forward_count: AtomicU64,
}

impl EncoderHandle {
    pub fn from_model(model: Transformer) -> Self {
        Self {
            model,
            include_embedding_layer: false,
            truncation_count: AtomicU64::new(0),
            forward_count: AtomicU64::new(0),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_model(Transformer::load(path)?))
    }

    pub fn with_embedding_layer(mut self, include: bool) -> Self {
        self.include_embedding_layer = include;
        self
    }

    pub fn model(&self) -> &Transformer {
        &self.model
    }

    pub fn model_id(&self) -> &str {
        &self.model.config.model_id
    }

    pub fn architecture(&self) -> Architecture {
        self.model.config.architecture
    }

    /// Number of layers stored per text (block outputs, plus the embedding
    /// layer when enabled).
    pub fn num_stored_layers(&self) -> usize {
        self.model.config.num_layers + usize::from(self.include_embedding_layer)
    }

    pub fn hidden_dim(&self) -> usize {
        self.model.config.hidden_dim
    }

    /// Texts truncated to `max_seq_len` so far.
    pub fn truncation_count(&self) -> u64 {
        self.truncation_count.load(Ordering::Relaxed)
    }

    /// Full forward passes run so far (one per uncached text).
    pub fn forward_count(&self) -> u64 {
        self.forward_count.load(Ordering::Relaxed)
    }

    /// Run the model and collect the post-block hidden states of every
    /// stored layer. Over-long texts are truncated silently; the handle
    /// counts truncations and logs them at debug level.
    pub fn extract_hidden_states(&self, text: &str) -> Result<LayerHiddenStates> {
        if text.trim().is_empty() {
            return Err(Error::Argument("cannot encode an empty text".into()));
        }
        let tokenized = tokenize(
            text,
            self.model.config.architecture,
            self.model.config.max_seq_len,
        );
        if tokenized.truncated {
            self.truncation_count.fetch_add(1, Ordering::Relaxed);
            log::debug!(
                "truncated text to {} tokens (total truncations: {})",
                tokenized.ids.len(),
                self.truncation_count(),
            );
        }
        let trace = self.model.forward_trace(&tokenized.ids, None)?;
        self.forward_count.fetch_add(1, Ordering::Relaxed);

        let mut layers = Vec::with_capacity(self.num_stored_layers());
        if self.include_embedding_layer {
            layers.push(trace.embedding_out.clone());
        }
        for block in &trace.blocks {
            layers.push(block.ffn.x2.clone());
        }
        let token_count = tokenized.ids.len();
        LayerHiddenStates::new(layers, vec![1u8; token_count], self.model.config.architecture)
    }

    /// Extract and pool one text.
    pub fn embed(&self, text: &str, pooling: Pooling) -> Result<LayerEmbeddings> {
        let states = self.extract_hidden_states(text)?;
        let vectors = pool(&states, pooling)?;
        LayerEmbeddings::new(vectors, pooling, text_hash(text))
    }

    /// Embed every text at every stored layer into a cache directory.
    /// Already-cached texts are skipped, so re-running against a warm cache
    /// performs no model invocations.
    pub fn precompute_embeddings(
        &self,
        texts: &[String],
        pooling: Pooling,
        cache_dir: &Path,
    ) -> Result<EmbeddingCache> {
        if pooling == Pooling::FirstToken && self.architecture() == Architecture::DecoderOnly {
            return Err(Error::PoolingMismatch(
                "first_token pooling is illegal for a decoder-only model".into(),
            ));
        }
        let header = CacheHeader {
            model_id: self.model_id().to_string(),
            pooling,
            num_layers: self.num_stored_layers(),
            hidden_dim: self.hidden_dim(),
        };
        let mut cache = EmbeddingCache::open(cache_dir, header)?;

        for text in texts {
            let hash = text_hash(text);
            if cache.contains(&hash) {
                continue;
            }
            let embeddings = self.embed(text, pooling)?;
            if let Err(e) = cache.insert(&hash, &embeddings.to_f32_flat()) {
                // Keep the manifest in sync with whatever made it to disk.
                cache.write_manifest().ok();
                return Err(Error::Storage(format!(
                    "failed to persist embedding for {hash}: {e} (partial manifest retained)"
                )));
            }
        }
        cache.write_manifest()?;
        Ok(cache)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{TransformerConfig, MIN_VOCAB_SIZE};
    use crate::sub_rng;
    use rand::Rng;

    fn toy_model(architecture: Architecture, num_layers: usize, hidden_dim: usize) -> Transformer {
        let num_heads = if hidden_dim % 4 == 0 { 4 } else { 1 };
        let config = TransformerConfig {
            model_id: format!("toy-{architecture}"),
            architecture,
            num_layers,
            hidden_dim,
            num_heads,
            intermediate_dim: 32,
            vocab_size: MIN_VOCAB_SIZE,
            max_seq_len: 24,
        };
        Transformer::init(config, 5).unwrap()
    }

    fn random_states(t: usize, d: usize, mask: Vec<u8>) -> LayerHiddenStates {
        let mut rng = sub_rng("enc-test", 1, &format!("{t}x{d}"));
        let layers = (0..3)
            .map(|_| Array2::from_shape_fn((t, d), |_| rng.random_range(-2.0..2.0)))
            .collect();
        LayerHiddenStates::new(layers, mask, Architecture::EncoderOnly).unwrap()
    }

    #[test]
    fn first_token_pooling_is_row_zero() {
        let h = random_states(5, 4, vec![1; 5]);
        let pooled = pool_first_token(&h).unwrap();
        for (vec, layer) in pooled.iter().zip(h.layers.iter()) {
            // independent slice oracle
            for j in 0..4 {
                assert_eq!(vec[j], layer[[0, j]]);
            }
        }
    }

    #[test]
    fn first_token_pooling_rejects_decoder() {
        let mut h = random_states(5, 4, vec![1; 5]);
        h.architecture = Architecture::DecoderOnly;
        let err = pool_first_token(&h).unwrap_err();
        assert!(matches!(err, Error::PoolingMismatch(_)));
    }

    #[test]
    fn mean_pooling_matches_loop_oracle_under_mask() {
        let mask = vec![1, 0, 1, 1, 0];
        let h = random_states(5, 4, mask.clone());
        let pooled = pool_mean(&h).unwrap();
        for (vec, layer) in pooled.iter().zip(h.layers.iter()) {
            for j in 0..4 {
                // explicit loop oracle
                let mut sum = 0.0;
                let mut count = 0.0;
                for t in 0..5 {
                    if mask[t] != 0 {
                        sum += layer[[t, j]];
                        count += 1.0;
                    }
                }
                assert!((vec[j] - sum / count).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn mean_of_identical_rows_is_that_row() {
        let row: Array1<f64> = (0..4).map(|i| i as f64 + 0.5).collect();
        let mut layer = Array2::zeros((3, 4));
        for mut r in layer.rows_mut() {
            r.assign(&row);
        }
        let h = LayerHiddenStates::new(vec![layer], vec![1; 3], Architecture::EncoderOnly).unwrap();
        let pooled = pool_mean(&h).unwrap();
        for j in 0..4 {
            assert!((pooled[0][j] - row[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_of_two_rows_is_their_midpoint() {
        let mut layer = Array2::zeros((2, 3));
        layer.row_mut(0).assign(&ndarray::arr1(&[1.0, 2.0, 3.0]));
        layer.row_mut(1).assign(&ndarray::arr1(&[3.0, 6.0, 9.0]));
        let h = LayerHiddenStates::new(vec![layer], vec![1; 2], Architecture::EncoderOnly).unwrap();
        let pooled = pool_mean(&h).unwrap();
        assert_eq!(pooled[0], ndarray::arr1(&[2.0, 4.0, 6.0]));
    }

    #[test]
    fn last_token_pooling_respects_mask() {
        // Right-padded sequence with five valid tokens pools row 4.
        let mask = vec![1, 1, 1, 1, 1, 0, 0];
        let h = random_states(7, 4, mask);
        let pooled = pool_last_token(&h).unwrap();
        for (vec, layer) in pooled.iter().zip(h.layers.iter()) {
            for j in 0..4 {
                assert_eq!(vec[j], layer[[4, j]]);
            }
        }

        // Full mask pools the final row.
        let h = random_states(6, 4, vec![1; 6]);
        let pooled = pool_last_token(&h).unwrap();
        for (vec, layer) in pooled.iter().zip(h.layers.iter()) {
            for j in 0..4 {
                assert_eq!(vec[j], layer[[5, j]]);
            }
        }
    }

    #[test]
    fn all_zero_mask_is_rejected() {
        let h = random_states(3, 4, vec![0; 3]);
        assert!(pool_mean(&h).is_err());
        assert!(pool_last_token(&h).is_err());
    }

    #[test]
    fn single_token_sequences_make_all_poolings_agree() {
        let h = random_states(1, 4, vec![1]);
        let first = pool_first_token(&h).unwrap();
        let mean = pool_mean(&h).unwrap();
        let last = pool_last_token(&h).unwrap();
        for layer in 0..3 {
            assert_eq!(first[layer], mean[layer]);
            assert_eq!(first[layer], last[layer]);
        }
    }

    #[test]
    fn mean_is_permutation_invariant_but_first_and_last_are_not() {
        let h = random_states(5, 4, vec![1; 5]);
        // Reverse the rows of every layer (a permutation moving both row 0
        // and the last row).
        let reversed: Vec<Array2<f64>> = h
            .layers
            .iter()
            .map(|layer| {
                let mut r = Array2::zeros(layer.raw_dim());
                for t in 0..5 {
                    r.row_mut(t).assign(&layer.row(4 - t));
                }
                r
            })
            .collect();
        let hr =
            LayerHiddenStates::new(reversed, vec![1; 5], Architecture::EncoderOnly).unwrap();

        let mean_a = pool_mean(&h).unwrap();
        let mean_b = pool_mean(&hr).unwrap();
        for layer in 0..3 {
            for j in 0..4 {
                assert!((mean_a[layer][j] - mean_b[layer][j]).abs() < 1e-9);
            }
        }

        let first_a = pool_first_token(&h).unwrap();
        let first_b = pool_first_token(&hr).unwrap();
        assert_ne!(first_a[0], first_b[0]);
        let last_a = pool_last_token(&h).unwrap();
        let last_b = pool_last_token(&hr).unwrap();
        assert_ne!(last_a[0], last_b[0]);
    }

    #[test]
    fn mean_pooling_stays_in_coordinatewise_convex_hull() {
        let h = random_states(6, 4, vec![1, 1, 0, 1, 1, 1]);
        let pooled = pool_mean(&h).unwrap();
        for (vec, layer) in pooled.iter().zip(h.layers.iter()) {
            for j in 0..4 {
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for t in 0..6 {
                    if h.attention_mask[t] != 0 {
                        lo = lo.min(layer[[t, j]]);
                        hi = hi.max(layer[[t, j]]);
                    }
                }
                assert!(vec[j] >= lo - 1e-12 && vec[j] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn pooling_adjoint_matches_pooling_linearity() {
        // pool(H) . s == sum(H * adjoint(s)) for every strategy, since all
        // poolings are linear in H.
        let h = random_states(5, 4, vec![1, 1, 1, 0, 1]);
        let mut rng = sub_rng("enc-test", 2, "seed");
        let seed = Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0));
        for pooling in [Pooling::FirstToken, Pooling::Mean, Pooling::LastToken] {
            let pooled = pool_rows(&h.layers[0], &h.attention_mask, pooling, h.architecture)
                .unwrap();
            let direct = pooled.dot(&seed);
            let adjoint = pooling_adjoint(5, &h.attention_mask, pooling, &seed).unwrap();
            let via_adjoint = (&h.layers[0] * &adjoint).sum();
            assert!((direct - via_adjoint).abs() < 1e-10, "{pooling:?}");
        }
    }

    #[test]
    fn twelve_layer_encoder_yields_twelve_768_wide_states() {
        let model = toy_model(Architecture::EncoderOnly, 12, 768);
        let handle = EncoderHandle::from_model(model);
        let states = handle.extract_hidden_states("a short text").unwrap();
        assert_eq!(states.layers.len(), 12);
        for layer in &states.layers {
            assert_eq!(layer.dim(), (states.token_count, 768));
        }
    }

    #[test]
    fn over_long_text_is_truncated_and_counted() {
        let model = toy_model(Architecture::EncoderOnly, 2, 16);
        let handle = EncoderHandle::from_model(model);
        let states = handle.extract_hidden_states(&"x".repeat(100)).unwrap();
        assert_eq!(states.token_count, 24); // max_seq_len
        assert_eq!(handle.truncation_count(), 1);
    }

    #[test]
    fn empty_text_is_rejected() {
        let model = toy_model(Architecture::EncoderOnly, 2, 16);
        let handle = EncoderHandle::from_model(model);
        assert!(handle.extract_hidden_states("").is_err());
        assert!(handle.extract_hidden_states("   ").is_err());
    }

    #[test]
    fn extraction_is_bitwise_deterministic() {
        let model = toy_model(Architecture::DecoderOnly, 2, 16);
        let handle = EncoderHandle::from_model(model);
        let a = handle.extract_hidden_states("same text").unwrap();
        let b = handle.extract_hidden_states("same text").unwrap();
        for (la, lb) in a.layers.iter().zip(b.layers.iter()) {
            for (x, y) in la.iter().zip(lb.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn embedding_layer_flag_adds_layer_zero() {
        let model = toy_model(Architecture::EncoderOnly, 2, 16);
        let handle = EncoderHandle::from_model(model).with_embedding_layer(true);
        assert_eq!(handle.num_stored_layers(), 3);
        let states = handle.extract_hidden_states("abc").unwrap();
        assert_eq!(states.layers.len(), 3);
    }

    #[test]
    fn precompute_is_idempotent_and_read_back_is_exact() {
        let model = toy_model(Architecture::EncoderOnly, 12, 768);
        let handle = EncoderHandle::from_model(model);
        let dir = tempfile::tempdir().unwrap();
        let texts: Vec<String> = (0..10).map(|i| format!("text number {i}")).collect();

        let cache = handle
            .precompute_embeddings(&texts, Pooling::FirstToken, dir.path())
            .unwrap();
        assert_eq!(cache.len(), 10);
        assert_eq!(handle.forward_count(), 10);
        for text in &texts {
            assert_eq!(cache.get(&text_hash(text)).unwrap().len(), 12 * 768);
        }

        // Warm rerun: no new model invocations.
        let cache = handle
            .precompute_embeddings(&texts, Pooling::FirstToken, dir.path())
            .unwrap();
        assert_eq!(cache.len(), 10);
        assert_eq!(handle.forward_count(), 10);

        // Read-back equals fresh computation exactly at storage precision.
        let fresh = handle.embed(&texts[3], Pooling::FirstToken).unwrap();
        let stored = cache.get(&text_hash(&texts[3])).unwrap();
        for (a, b) in fresh.to_f32_flat().iter().zip(stored.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn decoder_first_token_precompute_is_rejected() {
        let model = toy_model(Architecture::DecoderOnly, 2, 16);
        let handle = EncoderHandle::from_model(model);
        let dir = tempfile::tempdir().unwrap();
        let err = handle
            .precompute_embeddings(&["t".into()], Pooling::FirstToken, dir.path())
            .unwrap_err();
        assert!(matches!(err, Error::PoolingMismatch(_)));
    }
}
