//! Forward pass with full trace recording.
//!
//! Traces keep every intermediate needed by the backward pass. The
//! per-block attention part is stored behind an `Arc` so that attribution
//! can recompute only the feed-forward suffix when a neuron row is
//! overridden (the attention part of the overridden block and everything
//! upstream is unaffected by a feed-forward perturbation).

use super::{Architecture, LayerNormParams, Sublayer, Transformer};
use crate::error::{Error, Result};
use ndarray::{s, Array1, Array2};
use std::sync::Arc;

const LN_EPS: f64 = 1e-12;

/// Replaces the addressed neuron's weight row for one forward pass.
#[derive(Debug, Clone)]
pub struct NeuronOverride {
    /// 1-based block index.
    pub layer: usize,
    pub sublayer: Sublayer,
    pub index: usize,
    pub row: Array1<f64>,
}

/// Attention-side intermediates of one block (unaffected by feed-forward
/// neuron overrides in the same block).
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub attn_probs: Vec<Array2<f64>>,
    /// Residual sum entering the attention layer norm.
    pub y1: Array2<f64>,
    /// Attention layer-norm output; input to the feed-forward sub-layers.
    pub x1: Array2<f64>,
}

/// Feed-forward intermediates of one block.
#[derive(Debug, Clone)]
pub struct FfnTrace {
    /// Up-projection pre-activations.
    pub a: Array2<f64>,
    /// gelu(a).
    pub h: Array2<f64>,
    /// Residual sum entering the feed-forward layer norm.
    pub y2: Array2<f64>,
    /// Block output.
    pub x2: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct BlockTrace {
    pub attn: Arc<AttentionTrace>,
    pub ffn: FfnTrace,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub token_ids: Vec<usize>,
    /// Embedding-layer output (layer 0).
    pub embedding_out: Array2<f64>,
    pub blocks: Vec<BlockTrace>,
}

impl ForwardTrace {
    /// Hidden states of the final transformer block.
    pub fn final_hidden(&self) -> &Array2<f64> {
        &self.blocks.last().expect("at least one block").ffn.x2
    }

    pub fn token_count(&self) -> usize {
        self.token_ids.len()
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2))
}

/// d/dx gelu(x) = Phi(x) + x * phi(x) for the exact (erf) formulation.
pub fn gelu_prime(x: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2));
    let phi_pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi_cdf + x * phi_pdf
}

/// Row-wise softmax with max subtraction; rows may contain -inf entries.
pub fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Row-wise layer norm over the feature dimension.
pub fn layer_norm(x: &Array2<f64>, params: &LayerNormParams) -> Array2<f64> {
    let n = x.ncols() as f64;
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + LN_EPS).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv_std * params.gamma[j] + params.beta[j];
        }
    }
    out
}

impl Transformer {
    fn validate_override(&self, ov: &NeuronOverride) -> Result<()> {
        if ov.layer == 0 || ov.layer > self.config.num_layers {
            return Err(Error::Argument(format!(
                "override layer {} out of range 1..={}",
                ov.layer, self.config.num_layers
            )));
        }
        let width = self.sublayer_width(ov.sublayer);
        if ov.index >= width {
            return Err(Error::Argument(format!(
                "override neuron {} out of range for {} width {width}",
                ov.index, ov.sublayer
            )));
        }
        let expected = match ov.sublayer {
            Sublayer::Intermediate => self.config.hidden_dim,
            Sublayer::Output => self.config.intermediate_dim,
        };
        if ov.row.len() != expected {
            return Err(Error::Argument(format!(
                "override row length {} does not match expected {expected}",
                ov.row.len()
            )));
        }
        Ok(())
    }

    /// Full forward pass over already-tokenized input.
    pub fn forward_trace(
        &self,
        ids: &[usize],
        neuron_override: Option<&NeuronOverride>,
    ) -> Result<ForwardTrace> {
        if ids.is_empty() {
            return Err(Error::Argument("token sequence is empty".into()));
        }
        if ids.len() > self.config.max_seq_len {
            return Err(Error::Argument(format!(
                "sequence length {} exceeds max_seq_len {}",
                ids.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::Argument(format!(
                "token id {bad} out of vocabulary range"
            )));
        }
        if let Some(ov) = neuron_override {
            self.validate_override(ov)?;
        }

        let t = ids.len();
        let d = self.config.hidden_dim;
        let mut x0 = Array2::zeros((t, d));
        for (pos, &id) in ids.iter().enumerate() {
            let row = &self.token_embedding.row(id) + &self.position_embedding.row(pos);
            x0.row_mut(pos).assign(&row);
        }
        let embedding_out = layer_norm(&x0, &self.embedding_norm);

        let mut blocks = Vec::with_capacity(self.config.num_layers);
        let mut x = embedding_out.clone();
        for idx in 0..self.config.num_layers {
            let block_override = neuron_override.filter(|ov| ov.layer == idx + 1);
            let attn = Arc::new(self.run_attention(idx, &x));
            let ffn = self.run_ffn(idx, &attn.x1, block_override);
            x = ffn.x2.clone();
            blocks.push(BlockTrace { attn, ffn });
        }

        Ok(ForwardTrace {
            token_ids: ids.to_vec(),
            embedding_out,
            blocks,
        })
    }

    /// Recompute only what an override can affect: the feed-forward part of
    /// the overridden block and every block above it. Blocks below and the
    /// overridden block's attention part are shared with `base`.
    pub fn forward_suffix(
        &self,
        base: &ForwardTrace,
        neuron_override: &NeuronOverride,
    ) -> Result<ForwardTrace> {
        self.validate_override(neuron_override)?;
        let target = neuron_override.layer - 1;

        let mut blocks: Vec<BlockTrace> = base.blocks[..target].to_vec();
        let base_attn = Arc::clone(&base.blocks[target].attn);
        let ffn = self.run_ffn(target, &base_attn.x1, Some(neuron_override));
        let mut x = ffn.x2.clone();
        blocks.push(BlockTrace {
            attn: base_attn,
            ffn,
        });

        for idx in target + 1..self.config.num_layers {
            let attn = Arc::new(self.run_attention(idx, &x));
            let ffn = self.run_ffn(idx, &attn.x1, None);
            x = ffn.x2.clone();
            blocks.push(BlockTrace { attn, ffn });
        }

        Ok(ForwardTrace {
            token_ids: base.token_ids.clone(),
            embedding_out: base.embedding_out.clone(),
            blocks,
        })
    }

    fn run_attention(&self, idx: usize, x: &Array2<f64>) -> AttentionTrace {
        let b = &self.blocks[idx];
        let t = x.nrows();
        let d = self.config.hidden_dim;
        let heads = self.config.num_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let causal = self.config.architecture == Architecture::DecoderOnly;

        let q = x.dot(&b.wq.t()) + &b.bq;
        let k = x.dot(&b.wk.t()) + &b.bk;
        let v = x.dot(&b.wv.t()) + &b.bv;

        let mut ctx = Array2::zeros((t, d));
        let mut attn_probs = Vec::with_capacity(heads);
        for head in 0..heads {
            let cols = s![.., head * dh..(head + 1) * dh];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut scores = qh.dot(&kh.t());
            scores.mapv_inplace(|s| s * scale);
            if causal {
                for i in 0..t {
                    for j in i + 1..t {
                        scores[[i, j]] = f64::NEG_INFINITY;
                    }
                }
            }
            softmax_rows(&mut scores);
            ctx.slice_mut(cols).assign(&scores.dot(&vh));
            attn_probs.push(scores);
        }

        let attn_out = ctx.dot(&b.wo.t()) + &b.bo;
        let y1 = x + &attn_out;
        let x1 = layer_norm(&y1, &b.attn_norm);
        AttentionTrace {
            q,
            k,
            v,
            attn_probs,
            y1,
            x1,
        }
    }

    fn run_ffn(
        &self,
        idx: usize,
        x1: &Array2<f64>,
        neuron_override: Option<&NeuronOverride>,
    ) -> FfnTrace {
        let b = &self.blocks[idx];
        let mut a = x1.dot(&b.w_up.t()) + &b.b_up;
        if let Some(ov) = neuron_override.filter(|ov| ov.sublayer == Sublayer::Intermediate) {
            let patched = x1.dot(&ov.row) + b.b_up[ov.index];
            a.column_mut(ov.index).assign(&patched);
        }
        let h = a.mapv(gelu);
        let mut f = h.dot(&b.w_down.t()) + &b.b_down;
        if let Some(ov) = neuron_override.filter(|ov| ov.sublayer == Sublayer::Output) {
            let patched = h.dot(&ov.row) + b.b_down[ov.index];
            f.column_mut(ov.index).assign(&patched);
        }
        let y2 = x1 + &f;
        let x2 = layer_norm(&y2, &b.ffn_norm);
        FfnTrace { a, h, y2, x2 }
    }
}
