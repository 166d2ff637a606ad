use super::forward::{forward_sequence, AttentionCache, LayerNormCache, PeerCache, SequenceCache};
use super::math::{
    accumulate_rows, accumulate_xt_g, add_in_place, axpy, dot, gelu_grad, matmul_transposed,
};
use super::{DualModel, EncoderLayerParams, LayerNormParams, Matrix, Params};
use crate::error::{HailError, Result};
use crate::masking::MaskedBatch;

fn layer_norm_backward(
    dy: &Matrix,
    cache: &LayerNormCache,
    p: &LayerNormParams,
    grad: &mut LayerNormParams,
) -> Matrix {
    let d = dy.cols as f64;
    let mut dx = Matrix::zeros(dy.rows, dy.cols);
    for i in 0..dy.rows {
        let dyi = dy.row(i);
        let xh = cache.normalized.row(i);
        let mut dxh = vec![0.0; dy.cols];
        for c in 0..dy.cols {
            grad.gamma.data[c] += dyi[c] * xh[c];
            grad.beta.data[c] += dyi[c];
            dxh[c] = dyi[c] * p.gamma.data[c];
        }
        let mean_dxh = dxh.iter().sum::<f64>() / d;
        let mean_dxh_xh = dot(&dxh, xh) / d;
        let inv = cache.inv_std[i];
        for (c, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = inv * (dxh[c] - mean_dxh - xh[c] * mean_dxh_xh);
        }
    }
    dx
}

/// Backward through heads, output projection and residual. Returns dL/dH_prev.
fn attention_backward(
    d_out: &Matrix,
    cache: &AttentionCache,
    p: &EncoderLayerParams,
    grad: &mut EncoderLayerParams,
    heads: usize,
) -> Matrix {
    let n = d_out.rows;
    let d = d_out.cols;
    let dk = d / heads;
    let scale = (dk as f64).sqrt();

    accumulate_xt_g(&cache.ctx, d_out, &mut grad.wo);
    let d_ctx = matmul_transposed(d_out, &p.wo);

    let mut dq = Matrix::zeros(n, d);
    let mut dk_m = Matrix::zeros(n, d);
    let mut dv = Matrix::zeros(n, d);
    let mut d_weights = vec![0.0; n];
    for (r, w) in cache.weights.iter().enumerate() {
        let cols = r * dk..(r + 1) * dk;
        for i in 0..n {
            let dci = &d_ctx.row(i)[cols.clone()];
            let wi = w.row(i);
            for j in 0..n {
                d_weights[j] = dot(dci, &cache.v.row(j)[cols.clone()]);
                if wi[j] != 0.0 {
                    axpy(wi[j], dci, &mut dv.data[j * d + cols.start..j * d + cols.end]);
                }
            }
            let centered = dot(wi, &d_weights);
            let qi = &cache.q.row(i)[cols.clone()];
            for j in 0..n {
                let ds = wi[j] * (d_weights[j] - centered) / scale;
                if ds != 0.0 {
                    axpy(ds, &cache.k.row(j)[cols.clone()], &mut dq.data[i * d + cols.start..i * d + cols.end]);
                    axpy(ds, qi, &mut dk_m.data[j * d + cols.start..j * d + cols.end]);
                }
            }
        }
    }

    let h = &cache.input;
    accumulate_xt_g(h, &dq, &mut grad.wq);
    accumulate_xt_g(h, &dk_m, &mut grad.wk);
    accumulate_xt_g(h, &dv, &mut grad.wv);
    let mut dh = d_out.clone();
    add_in_place(&mut dh, &matmul_transposed(&dq, &p.wq));
    add_in_place(&mut dh, &matmul_transposed(&dk_m, &p.wk));
    add_in_place(&mut dh, &matmul_transposed(&dv, &p.wv));
    dh
}

/// Accumulates into `grads` the gradient of Σ_c ⟨dlogits[c], z_c⟩ for one
/// sequence through one peer, where z_c are the logits of the masked
/// positions recorded in `cache`.
pub fn backward_sequence(
    model: &DualModel,
    peer: usize,
    tokens: &[u32],
    cache: &SequenceCache,
    dlogits: &[Vec<f64>],
    grads: &mut Params,
) -> Result<()> {
    if dlogits.len() != cache.head.len() {
        return Err(HailError::contract(format!(
            "{} logit gradients for {} cached coordinates",
            dlogits.len(),
            cache.head.len()
        )));
    }
    let shared = &model.params.shared;
    let d = model.shape.d;
    let n = tokens.len();
    let mut dh = Matrix::zeros(n, d);

    // Prediction head.
    {
        let g = &mut grads.shared;
        for (hc, dz) in cache.head.iter().zip(dlogits) {
            let mut du = vec![0.0; d];
            for (v, &dzv) in dz.iter().enumerate() {
                if dzv != 0.0 {
                    g.out_bias.data[v] += dzv;
                    axpy(dzv, &hc.act, g.element.row_mut(v));
                    axpy(dzv, shared.element.row(v), &mut du);
                }
            }
            let dt: Vec<f64> = du.iter().zip(&hc.pre).map(|(a, &t)| a * gelu_grad(t)).collect();
            let h = cache.output.row(hc.position);
            for (kk, &x) in h.iter().enumerate() {
                if x != 0.0 {
                    axpy(x, &dt, g.pred_weight.row_mut(kk));
                }
            }
            for (b, t) in g.pred_bias.data.iter_mut().zip(&dt) {
                *b += t;
            }
            let dhi = dh.row_mut(hc.position);
            for (kk, o) in dhi.iter_mut().enumerate() {
                *o += dot(shared.pred_weight.row(kk), &dt);
            }
        }
    }

    let stack = &model.params.peers[peer];
    let gstack = &mut grads.peers[peer];
    for ((lp, lg), lc) in stack.layers.iter().zip(gstack.layers.iter_mut()).zip(&cache.layers).rev() {
        let d_ffn_out = match (&lp.norms, &mut lg.norms, &lc.ln_ffn) {
            (Some([_, ln]), Some([_, lng]), Some(c)) => layer_norm_backward(&dh, c, ln, lng),
            _ => dh,
        };
        // out = act·W2 + b2 + a0
        accumulate_xt_g(&lc.ffn_act, &d_ffn_out, &mut lg.w2);
        accumulate_rows(&d_ffn_out, &mut lg.b2);
        let mut d_pre = matmul_transposed(&d_ffn_out, &lp.w2);
        for (g, &x) in d_pre.data.iter_mut().zip(&lc.ffn_pre.data) {
            *g *= gelu_grad(x);
        }
        accumulate_xt_g(&lc.a0, &d_pre, &mut lg.w1);
        accumulate_rows(&d_pre, &mut lg.b1);
        let mut d_a0 = d_ffn_out;
        add_in_place(&mut d_a0, &matmul_transposed(&d_pre, &lp.w1));

        let d_attn_out = match (&lp.norms, &mut lg.norms, &lc.ln_attn) {
            (Some([ln, _]), Some([lng, _]), Some(c)) => layer_norm_backward(&d_a0, c, ln, lng),
            _ => d_a0,
        };
        dh = attention_backward(&d_attn_out, &lc.attn, lp, lg, model.shape.heads);
    }

    let g = &mut grads.shared;
    for (i, &t) in tokens.iter().enumerate() {
        let dhi = dh.row(i);
        axpy(1.0, dhi, g.element.row_mut(t as usize));
        axpy(1.0, dhi, g.positional.row_mut(i));
    }
    Ok(())
}

/// Backpropagates logit gradients (aligned with `batch.mask_index`) through
/// one peer, accumulating into `grads`. Shared-table gradients add up across
/// calls for different peers.
pub fn backward(
    model: &DualModel,
    peer: usize,
    batch: &MaskedBatch,
    cache: &PeerCache,
    dlogits: &[Vec<f64>],
    grads: &mut Params,
) -> Result<()> {
    if cache.peer != peer || cache.rows.len() != batch.rows() || cache.coords != batch.masked_count() {
        return Err(HailError::contract(format!(
            "forward cache (peer {}, {} rows) does not match backward request (peer {peer}, {} rows)",
            cache.peer,
            cache.rows.len(),
            batch.rows()
        )));
    }
    if dlogits.len() != batch.masked_count() {
        return Err(HailError::contract("logit gradients misaligned with mask_index"));
    }
    for (row, range) in batch.row_coords().into_iter().enumerate() {
        if range.is_empty() {
            continue;
        }
        let tokens = batch.row_tokens(row);
        let recomputed;
        let seq_cache = match &cache.rows[row] {
            Some(c) => c,
            None => {
                let positions: Vec<usize> = batch.mask_index[range.clone()].iter().map(|&(_, c)| c).collect();
                recomputed = forward_sequence(model, peer, tokens, None, &positions)?.1;
                &recomputed
            }
        };
        backward_sequence(model, peer, tokens, seq_cache, &dlogits[range], grads)?;
    }
    Ok(())
}
