//! A self-contained transformer text encoder with explicit forward traces
//! and the backward passes needed for neuron attribution.
//!
//! The implementation targets exact measurement rather than speed: all math
//! is f64, execution is deterministic, and the per-block feed-forward
//! sub-layers (`intermediate` up-projection, `output` down-projection)
//! expose their weight rows as addressable neurons whose vectors can be
//! overridden during a forward pass.

mod backward;
mod forward;
mod tokenizer;

pub use backward::backward_to_row;
pub use forward::{gelu, layer_norm, softmax_rows, BlockTrace, ForwardTrace, NeuronOverride};
pub use tokenizer::{tokenize, TokenizedText, CLS_TOKEN, EOS_TOKEN, MIN_VOCAB_SIZE, PAD_TOKEN};

use crate::error::{Error, Result};
use crate::sub_rng;
use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Transformer family: encoder-only models attend bidirectionally and carry
/// a leading classification token; decoder-only models attend causally and
/// carry a trailing end-of-sequence token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    EncoderOnly,
    DecoderOnly,
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Architecture::EncoderOnly => write!(f, "encoder_only"),
            Architecture::DecoderOnly => write!(f, "decoder_only"),
        }
    }
}

/// The feed-forward sub-layer a neuron lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sublayer {
    /// Up-projection; neuron i is row i of the (d_ff x d) weight matrix.
    Intermediate,
    /// Down-projection; neuron i is row i of the (d x d_ff) weight matrix.
    Output,
}

impl std::fmt::Display for Sublayer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Sublayer::Intermediate => write!(f, "intermediate"),
            Sublayer::Output => write!(f, "output"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub model_id: String,
    pub architecture: Architecture,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub intermediate_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Argument("num_layers must be >= 1".into()));
        }
        if self.hidden_dim == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Argument(format!(
                "hidden_dim {} must be a positive multiple of num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.intermediate_dim == 0 {
            return Err(Error::Argument("intermediate_dim must be >= 1".into()));
        }
        if self.vocab_size < MIN_VOCAB_SIZE {
            return Err(Error::Argument(format!(
                "vocab_size must be >= {MIN_VOCAB_SIZE} (byte tokens plus specials)"
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Argument("max_seq_len must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockWeights {
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub attn_norm: LayerNormParams,
    /// Up-projection, shape (intermediate_dim, hidden_dim).
    pub w_up: Array2<f64>,
    pub b_up: Array1<f64>,
    /// Down-projection, shape (hidden_dim, intermediate_dim).
    pub w_down: Array2<f64>,
    pub b_down: Array1<f64>,
    pub ffn_norm: LayerNormParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transformer {
    pub config: TransformerConfig,
    pub token_embedding: Array2<f64>,
    pub position_embedding: Array2<f64>,
    pub embedding_norm: LayerNormParams,
    pub blocks: Vec<BlockWeights>,
}

fn uniform_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

impl Transformer {
    /// Randomly initialize a model from a seed. Weight scales follow the
    /// usual 1/sqrt(fan_in) convention; norms start at identity.
    pub fn init(config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let d_ff = config.intermediate_dim;
        let mut rng = sub_rng("model-init", seed, &config.model_id);

        let token_embedding = uniform_matrix(&mut rng, config.vocab_size, d, 0.1);
        let position_embedding = uniform_matrix(&mut rng, config.max_seq_len, d, 0.1);
        let identity_norm = || LayerNormParams {
            gamma: Array1::ones(d),
            beta: Array1::zeros(d),
        };

        let attn_scale = 1.0 / (d as f64).sqrt();
        let up_scale = 1.0 / (d as f64).sqrt();
        let down_scale = 1.0 / (d_ff as f64).sqrt();
        let blocks = (0..config.num_layers)
            .map(|_| BlockWeights {
                wq: uniform_matrix(&mut rng, d, d, attn_scale),
                bq: Array1::zeros(d),
                wk: uniform_matrix(&mut rng, d, d, attn_scale),
                bk: Array1::zeros(d),
                wv: uniform_matrix(&mut rng, d, d, attn_scale),
                bv: Array1::zeros(d),
                wo: uniform_matrix(&mut rng, d, d, attn_scale),
                bo: Array1::zeros(d),
                attn_norm: identity_norm(),
                w_up: uniform_matrix(&mut rng, d_ff, d, up_scale),
                b_up: Array1::zeros(d_ff),
                w_down: uniform_matrix(&mut rng, d, d_ff, down_scale),
                b_down: Array1::zeros(d),
                ffn_norm: identity_norm(),
            })
            .collect();

        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            embedding_norm: identity_norm(),
            blocks,
        })
    }

    /// Produce a perturbed copy of the model under a new id, standing in for
    /// a fine-tuned variant of the same topology.
    pub fn perturbed(&self, new_model_id: &str, scale: f64, seed: u64) -> Self {
        let mut copy = self.clone();
        copy.config.model_id = new_model_id.to_string();
        let mut rng = sub_rng("model-perturb", seed, new_model_id);
        copy.token_embedding
            .mapv_inplace(|w| w + scale * rng.random_range(-1.0..1.0));
        copy.position_embedding
            .mapv_inplace(|w| w + scale * rng.random_range(-1.0..1.0));
        for block in &mut copy.blocks {
            for m in [
                &mut block.wq,
                &mut block.wk,
                &mut block.wv,
                &mut block.wo,
                &mut block.w_up,
                &mut block.w_down,
            ] {
                m.mapv_inplace(|w| w + scale * rng.random_range(-1.0..1.0));
            }
            for v in [
                &mut block.bq,
                &mut block.bk,
                &mut block.bv,
                &mut block.bo,
                &mut block.b_up,
                &mut block.b_down,
            ] {
                v.mapv_inplace(|w| w + scale * rng.random_range(-1.0..1.0));
            }
        }
        copy
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let writer = std::io::BufWriter::new(file);
        serde_json::to_writer(writer, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| {
            Error::Environment(format!("cannot open model file {}: {e}", path.display()))
        })?;
        let reader = std::io::BufReader::new(file);
        let model: Transformer = serde_json::from_reader(reader)
            .map_err(|e| Error::Environment(format!("cannot parse model file: {e}")))?;
        model.config.validate()?;
        let d = model.config.hidden_dim;
        let d_ff = model.config.intermediate_dim;
        if model.blocks.len() != model.config.num_layers {
            return Err(Error::Environment(format!(
                "model declares {} layers but carries {} blocks",
                model.config.num_layers,
                model.blocks.len()
            )));
        }
        for (i, b) in model.blocks.iter().enumerate() {
            if b.w_up.dim() != (d_ff, d) || b.w_down.dim() != (d, d_ff) {
                return Err(Error::Environment(format!(
                    "block {i} feed-forward shapes do not match the config"
                )));
            }
        }
        Ok(model)
    }

    /// Width of a sublayer's neuron index space.
    pub fn sublayer_width(&self, sublayer: Sublayer) -> usize {
        match sublayer {
            Sublayer::Intermediate => self.config.intermediate_dim,
            Sublayer::Output => self.config.hidden_dim,
        }
    }

    /// The learned weight row for an addressed neuron.
    pub fn neuron_row(&self, layer: usize, sublayer: Sublayer, index: usize) -> Result<Array1<f64>> {
        if layer == 0 || layer > self.config.num_layers {
            return Err(Error::Argument(format!(
                "layer {layer} out of range 1..={}",
                self.config.num_layers
            )));
        }
        if index >= self.sublayer_width(sublayer) {
            return Err(Error::Argument(format!(
                "neuron index {index} out of range for {sublayer} width {}",
                self.sublayer_width(sublayer)
            )));
        }
        let block = &self.blocks[layer - 1];
        let row = match sublayer {
            Sublayer::Intermediate => block.w_up.row(index),
            Sublayer::Output => block.w_down.row(index),
        };
        Ok(row.to_owned())
    }
}
