//! Reverse-mode gradients from the final hidden states down to one
//! feed-forward neuron's weight row.
//!
//! Attribution only ever differentiates with respect to a single neuron's
//! weight vector, so the walk stops as soon as the gradient reaches the
//! addressed block's feed-forward sub-layer; attention weights and blocks
//! below the target never need adjoints.

use super::forward::{gelu_prime, ForwardTrace};
use super::{LayerNormParams, Sublayer, Transformer};
use crate::error::{Error, Result};
use ndarray::{s, Array1, Array2};

const LN_EPS: f64 = 1e-12;

/// Backward through row-wise layer norm: `y_pre` is the pre-norm input
/// recorded in the trace, `g_out` the gradient at the norm output.
fn layer_norm_backward(
    y_pre: &Array2<f64>,
    params: &LayerNormParams,
    g_out: &Array2<f64>,
) -> Array2<f64> {
    let n = y_pre.ncols() as f64;
    let mut g_in = Array2::zeros(y_pre.raw_dim());
    for (row_idx, row) in y_pre.rows().into_iter().enumerate() {
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + LN_EPS).sqrt();

        let g_row = g_out.row(row_idx);
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for j in 0..y_pre.ncols() {
            let xhat = (row[j] - mean) * inv_std;
            let gg = g_row[j] * params.gamma[j];
            sum_g += gg;
            sum_gx += gg * xhat;
        }
        for j in 0..y_pre.ncols() {
            let xhat = (row[j] - mean) * inv_std;
            let gg = g_row[j] * params.gamma[j];
            g_in[[row_idx, j]] = inv_std * (gg - sum_g / n - xhat * sum_gx / n);
        }
    }
    g_in
}

/// Backward through row-wise softmax given the forward probabilities.
fn softmax_backward(probs: &Array2<f64>, g_probs: &Array2<f64>) -> Array2<f64> {
    let mut g_scores = Array2::zeros(probs.raw_dim());
    for r in 0..probs.nrows() {
        let dot: f64 = (0..probs.ncols())
            .map(|j| g_probs[[r, j]] * probs[[r, j]])
            .sum();
        for j in 0..probs.ncols() {
            g_scores[[r, j]] = probs[[r, j]] * (g_probs[[r, j]] - dot);
        }
    }
    g_scores
}

/// Propagate `g_final` (gradient with respect to the last block's output)
/// down to the addressed neuron's weight row and return that row gradient.
///
/// The trace must come from a forward pass whose override (if any) targeted
/// the same address, so the recorded intermediates match the evaluation
/// point of the gradient.
pub fn backward_to_row(
    model: &Transformer,
    trace: &ForwardTrace,
    g_final: Array2<f64>,
    layer: usize,
    sublayer: Sublayer,
    index: usize,
) -> Result<Array1<f64>> {
    let num_layers = model.config.num_layers;
    if layer == 0 || layer > num_layers {
        return Err(Error::Argument(format!(
            "layer {layer} out of range 1..={num_layers}"
        )));
    }
    if index >= model.sublayer_width(sublayer) {
        return Err(Error::Argument(format!(
            "neuron index {index} out of range for {sublayer}"
        )));
    }

    let target = layer - 1;
    let mut g = g_final;
    for b in (target..num_layers).rev() {
        let weights = &model.blocks[b];
        let bt = &trace.blocks[b];

        // x2 = LN(y2); y2 = x1 + f
        let g_y2 = layer_norm_backward(&bt.ffn.y2, &weights.ffn_norm, &g);

        if b == target {
            return Ok(match sublayer {
                // f[:, c] = h . row + b_down[c]  =>  d/d(row) = h^T g_f[:, c]
                Sublayer::Output => bt.ffn.h.t().dot(&g_y2.column(index)),
                // a[:, i] = x1 . row + b_up[i]   =>  d/d(row) = x1^T g_a[:, i]
                Sublayer::Intermediate => {
                    let g_h = g_y2.dot(&weights.w_down);
                    let g_a_col: Array1<f64> = (0..g_h.nrows())
                        .map(|t| g_h[[t, index]] * gelu_prime(bt.ffn.a[[t, index]]))
                        .collect();
                    bt.attn.x1.t().dot(&g_a_col)
                }
            });
        }

        // Continue upstream: feed-forward backward...
        let g_h = g_y2.dot(&weights.w_down);
        let mut g_a = g_h;
        ndarray::Zip::from(&mut g_a)
            .and(&bt.ffn.a)
            .for_each(|g, &a| *g *= gelu_prime(a));
        let g_x1 = &g_y2 + &g_a.dot(&weights.w_up);

        // ...then attention backward: x1 = LN(y1); y1 = x + attn_out.
        let g_y1 = layer_norm_backward(&bt.attn.y1, &weights.attn_norm, &g_x1);
        let g_ctx = g_y1.dot(&weights.wo);

        let d = model.config.hidden_dim;
        let heads = model.config.num_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let t = g_ctx.nrows();
        let mut g_q = Array2::zeros((t, d));
        let mut g_k = Array2::zeros((t, d));
        let mut g_v = Array2::zeros((t, d));
        for head in 0..heads {
            let cols = s![.., head * dh..(head + 1) * dh];
            let probs = &bt.attn.attn_probs[head];
            let g_ctx_h = g_ctx.slice(cols);
            let vh = bt.attn.v.slice(cols);
            let kh = bt.attn.k.slice(cols);
            let qh = bt.attn.q.slice(cols);

            let g_probs = g_ctx_h.dot(&vh.t());
            g_v.slice_mut(cols).assign(&probs.t().dot(&g_ctx_h));
            let mut g_scores = softmax_backward(probs, &g_probs);
            g_scores.mapv_inplace(|v| v * scale);
            g_q.slice_mut(cols).assign(&g_scores.dot(&kh));
            g_k.slice_mut(cols).assign(&g_scores.t().dot(&qh));
        }

        g = &g_y1 + &(g_q.dot(&weights.wq) + g_k.dot(&weights.wk) + g_v.dot(&weights.wv));
    }

    unreachable!("target block is always reached")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward::NeuronOverride;
    use crate::model::tokenizer::tokenize;
    use crate::model::{Architecture, TransformerConfig, MIN_VOCAB_SIZE};
    use crate::sub_rng;
    use rand::Rng;

    fn toy(architecture: Architecture) -> Transformer {
        let config = TransformerConfig {
            model_id: "toy".into(),
            architecture,
            num_layers: 2,
            hidden_dim: 16,
            num_heads: 2,
            intermediate_dim: 32,
            vocab_size: MIN_VOCAB_SIZE,
            max_seq_len: 32,
        };
        Transformer::init(config, 11).unwrap()
    }

    /// Scalar objective sum(final_hidden * r) whose adjoint seed is r,
    /// evaluated with a neuron row override.
    fn objective(model: &Transformer, ids: &[usize], ov: &NeuronOverride, r: &Array2<f64>) -> f64 {
        let trace = model.forward_trace(ids, Some(ov)).unwrap();
        (trace.final_hidden() * r).sum()
    }

    #[test]
    fn row_gradient_matches_central_finite_differences() {
        for architecture in [Architecture::EncoderOnly, Architecture::DecoderOnly] {
            let model = toy(architecture);
            let ids = tokenize("gradient check", architecture, 32).ids;
            let t = ids.len();
            let mut rng = sub_rng("bw-test", 3, "seed-matrix");
            let r = Array2::from_shape_fn((t, 16), |_| rng.random_range(-1.0..1.0));

            for (layer, sublayer, index) in [
                (1, Sublayer::Intermediate, 4),
                (1, Sublayer::Output, 9),
                (2, Sublayer::Intermediate, 20),
                (2, Sublayer::Output, 15),
            ] {
                let row = model.neuron_row(layer, sublayer, index).unwrap() * 0.6;
                let ov = NeuronOverride {
                    layer,
                    sublayer,
                    index,
                    row: row.clone(),
                };
                let trace = model.forward_trace(&ids, Some(&ov)).unwrap();
                let analytic =
                    backward_to_row(&model, &trace, r.clone(), layer, sublayer, index).unwrap();

                let h = 1e-5;
                let mut fd = Array1::zeros(row.len());
                for j in 0..row.len() {
                    let mut plus = ov.clone();
                    plus.row[j] += h;
                    let mut minus = ov.clone();
                    minus.row[j] -= h;
                    fd[j] = (objective(&model, &ids, &plus, &r)
                        - objective(&model, &ids, &minus, &r))
                        / (2.0 * h);
                }

                let num = (&analytic - &fd).mapv(|v| v * v).sum().sqrt();
                let den = fd.mapv(|v| v * v).sum().sqrt().max(1e-12);
                assert!(
                    num / den < 1e-6,
                    "{architecture:?} layer {layer} {sublayer} {index}: rel err {}",
                    num / den
                );
            }
        }
    }

    #[test]
    fn rejects_out_of_range_targets() {
        let model = toy(Architecture::EncoderOnly);
        let ids = tokenize("bounds", Architecture::EncoderOnly, 32).ids;
        let trace = model.forward_trace(&ids, None).unwrap();
        let g = Array2::zeros((ids.len(), 16));
        assert!(backward_to_row(&model, &trace, g.clone(), 0, Sublayer::Output, 0).is_err());
        assert!(backward_to_row(&model, &trace, g.clone(), 3, Sublayer::Output, 0).is_err());
        assert!(backward_to_row(&model, &trace, g, 1, Sublayer::Intermediate, 32).is_err());
    }
}
