use super::math::{affine, dot, gelu, matmul, softmax_in_place};
use super::{DualModel, EncoderLayerParams, LayerNormParams, Matrix, ProbabilityRow, SharedTables};
use crate::error::{HailError, Result};
use crate::masking::MaskedBatch;

/// Additive score for padded keys.
pub const PAD_SCORE: f64 = -1e9;
const LN_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
pub(crate) struct AttentionCache {
    pub input: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Softmax weights per head, n × n each.
    pub weights: Vec<Matrix>,
    pub ctx: Matrix,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerNormCache {
    pub normalized: Matrix,
    pub inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    pub attn: AttentionCache,
    pub ln_attn: Option<LayerNormCache>,
    /// Attention sublayer output (after normalization when enabled).
    pub a0: Matrix,
    pub ffn_pre: Matrix,
    pub ffn_act: Matrix,
    pub ln_ffn: Option<LayerNormCache>,
}

#[derive(Debug, Clone)]
pub(crate) struct HeadCache {
    pub position: usize,
    pub pre: Vec<f64>,
    pub act: Vec<f64>,
}

/// Activations of one sequence through one peer.
#[derive(Debug, Clone)]
pub struct SequenceCache {
    pub(crate) layers: Vec<LayerCache>,
    pub(crate) output: Matrix,
    pub(crate) head: Vec<HeadCache>,
}

/// Activations of a whole batch through one peer. Rows may be absent, in
/// which case backward recomputes them.
#[derive(Debug, Clone)]
pub struct PeerCache {
    pub peer: usize,
    pub rows: Vec<Option<SequenceCache>>,
    pub coords: usize,
}

fn check_tokens(tokens: &[u32], shared: &SharedTables) -> Result<()> {
    if tokens.len() > shared.positional.rows {
        return Err(HailError::Index(format!(
            "sequence length {} exceeds positional table {}",
            tokens.len(),
            shared.positional.rows
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= shared.element.rows) {
        return Err(HailError::Index(format!(
            "token id {t} outside embedding table of {} rows",
            shared.element.rows
        )));
    }
    Ok(())
}

fn embed_tokens(tokens: &[u32], shared: &SharedTables) -> Matrix {
    let d = shared.element.cols;
    let mut h = Matrix::zeros(tokens.len(), d);
    for (i, &t) in tokens.iter().enumerate() {
        let row = h.row_mut(i);
        for ((o, u), s) in row.iter_mut().zip(shared.element.row(t as usize)).zip(shared.positional.row(i)) {
            *o = u + s;
        }
    }
    h
}

/// H0[b, i] = U[token] + S[i] over the full padded matrix, one N × d matrix
/// per batch row.
pub fn embed(batch: &MaskedBatch, shared: &SharedTables) -> Result<Vec<Matrix>> {
    batch
        .token_matrix
        .iter()
        .map(|tokens| {
            check_tokens(tokens, shared)?;
            Ok(embed_tokens(tokens, shared))
        })
        .collect()
}

/// Multi-head scaled dot-product attention plus the residual, on one sequence.
pub(crate) fn attention_forward(
    h: &Matrix,
    p: &EncoderLayerParams,
    heads: usize,
    key_pad: Option<&[bool]>,
) -> Result<(Matrix, AttentionCache)> {
    let n = h.rows;
    let d = h.cols;
    let dk = d / heads;
    let scale = (dk as f64).sqrt();
    let q = matmul(h, &p.wq);
    let k = matmul(h, &p.wk);
    let v = matmul(h, &p.wv);
    let mut ctx = Matrix::zeros(n, d);
    let mut weights = Vec::with_capacity(heads);
    for r in 0..heads {
        let cols = r * dk..(r + 1) * dk;
        let mut w = Matrix::zeros(n, n);
        for i in 0..n {
            let qi = &q.row(i)[cols.clone()];
            let scores = w.row_mut(i);
            for (j, s) in scores.iter_mut().enumerate() {
                *s = dot(qi, &k.row(j)[cols.clone()]) / scale;
                if key_pad.is_some_and(|pad| pad[j]) {
                    *s += PAD_SCORE;
                }
            }
            if scores.iter().any(|s| s.is_nan()) {
                return Err(HailError::Numeric(format!("NaN attention score at position {i}, head {r}")));
            }
            softmax_in_place(scores);
            let ci = &mut ctx.data[i * d + cols.start..i * d + cols.end];
            for (j, &a) in scores.iter().enumerate() {
                if a != 0.0 {
                    for (c, vv) in ci.iter_mut().zip(&v.row(j)[cols.clone()]) {
                        *c += a * vv;
                    }
                }
            }
        }
        weights.push(w);
    }
    let mut out = matmul(&ctx, &p.wo);
    super::math::add_in_place(&mut out, h);
    Ok((
        out,
        AttentionCache {
            input: h.clone(),
            q,
            k,
            v,
            weights,
            ctx,
        },
    ))
}

pub(crate) fn ffn_forward(a0: &Matrix, p: &EncoderLayerParams) -> (Matrix, Matrix, Matrix) {
    let pre = affine(a0, &p.w1, &p.b1);
    let mut act = pre.clone();
    act.data.iter_mut().for_each(|x| *x = gelu(*x));
    let mut out = affine(&act, &p.w2, &p.b2);
    super::math::add_in_place(&mut out, a0);
    (out, pre, act)
}

pub(crate) fn layer_norm_forward(x: &Matrix, p: &LayerNormParams) -> (Matrix, LayerNormCache) {
    let d = x.cols as f64;
    let mut y = Matrix::zeros(x.rows, x.cols);
    let mut normalized = Matrix::zeros(x.rows, x.cols);
    let mut inv_std = Vec::with_capacity(x.rows);
    for i in 0..x.rows {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(inv);
        let nrow = normalized.row_mut(i);
        for (o, v) in nrow.iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
        for (((o, xh), g), b) in y.row_mut(i).iter_mut().zip(normalized.row(i)).zip(&p.gamma.data).zip(&p.beta.data) {
            *o = g * xh + b;
        }
    }
    (y, LayerNormCache { normalized, inv_std })
}

/// Layer normalization over the feature dimension of each row.
pub fn layer_norm(x: &Matrix, p: &LayerNormParams) -> Matrix {
    layer_norm_forward(x, p).0
}

/// Attention sublayer (heads, output projection, residual) on every batch
/// row; `pad_mask[b][j]` marks padded keys.
pub fn attention_sublayer(
    h_prev: &[Matrix],
    params: &EncoderLayerParams,
    heads: usize,
    pad_mask: &[Vec<bool>],
) -> Result<Vec<Matrix>> {
    h_prev
        .iter()
        .zip(pad_mask)
        .enumerate()
        .map(|(b, (h, pad))| {
            attention_forward(h, params, heads, Some(pad))
                .map(|(out, _)| out)
                .map_err(|e| HailError::Numeric(format!("batch row {b}: {e}")))
        })
        .collect()
}

/// Feed-forward sublayer with GELU and residual on every batch row.
pub fn ffn_sublayer(a0: &[Matrix], params: &EncoderLayerParams) -> Vec<Matrix> {
    a0.iter().map(|a| ffn_forward(a, params).0).collect()
}

/// Runs one peer over one sequence and decodes the masked positions.
pub fn forward_sequence(
    model: &DualModel,
    peer: usize,
    tokens: &[u32],
    key_pad: Option<&[bool]>,
    masked_positions: &[usize],
) -> Result<(Vec<ProbabilityRow>, SequenceCache)> {
    let shared = &model.params.shared;
    check_tokens(tokens, shared)?;
    let stack = model
        .params
        .peers
        .get(peer)
        .ok_or_else(|| HailError::contract(format!("peer index {peer} out of range")))?;
    let mut h = embed_tokens(tokens, shared);
    let mut layers = Vec::with_capacity(stack.layers.len());
    for lp in &stack.layers {
        let (attn_out, attn) = attention_forward(&h, lp, model.shape.heads, key_pad)?;
        let (a0, ln_attn) = match &lp.norms {
            Some([ln, _]) => {
                let (y, c) = layer_norm_forward(&attn_out, ln);
                (y, Some(c))
            }
            None => (attn_out, None),
        };
        let (ffn_out, ffn_pre, ffn_act) = ffn_forward(&a0, lp);
        let (out, ln_ffn) = match &lp.norms {
            Some([_, ln]) => {
                let (y, c) = layer_norm_forward(&ffn_out, ln);
                (y, Some(c))
            }
            None => (ffn_out, None),
        };
        layers.push(LayerCache {
            attn,
            ln_attn,
            a0,
            ffn_pre,
            ffn_act,
            ln_ffn,
        });
        h = out;
    }

    let mut head = Vec::with_capacity(masked_positions.len());
    let mut rows = Vec::with_capacity(masked_positions.len());
    for &pos in masked_positions {
        let (row, cache) = decode(shared, h.row(pos), pos);
        rows.push(row);
        head.push(cache);
    }
    Ok((
        rows,
        SequenceCache {
            layers,
            output: h,
            head,
        },
    ))
}

/// z = GELU(h·W_P + b_P)·Uᵀ + b_U, p = softmax(z).
fn decode(shared: &SharedTables, h: &[f64], position: usize) -> (ProbabilityRow, HeadCache) {
    let d = shared.pred_weight.cols;
    let mut pre = shared.pred_bias.data.clone();
    for (kk, &x) in h.iter().enumerate() {
        if x != 0.0 {
            super::math::axpy(x, shared.pred_weight.row(kk), &mut pre);
        }
    }
    debug_assert_eq!(pre.len(), d);
    let act: Vec<f64> = pre.iter().map(|&x| gelu(x)).collect();
    let logits: Vec<f64> = (0..shared.element.rows)
        .map(|v| dot(&act, shared.element.row(v)) + shared.out_bias.data[v])
        .collect();
    (
        ProbabilityRow::from_logits(logits),
        HeadCache { position, pre, act },
    )
}

/// Probability rows for every masked coordinate of the batch, in
/// `mask_index` order.
pub fn forward_peer(model: &DualModel, peer: usize, batch: &MaskedBatch) -> Result<Vec<ProbabilityRow>> {
    Ok(forward_peer_cached(model, peer, batch, false)?.0)
}

/// As [`forward_peer`], optionally keeping per-row activations for backward.
pub fn forward_peer_cached(
    model: &DualModel,
    peer: usize,
    batch: &MaskedBatch,
    keep_cache: bool,
) -> Result<(Vec<ProbabilityRow>, PeerCache)> {
    if peer >= model.peers() {
        return Err(HailError::contract(format!("peer index {peer} out of range")));
    }
    let ranges = batch.row_coords();
    let mut out = Vec::with_capacity(batch.masked_count());
    let mut caches = Vec::with_capacity(batch.rows());
    for (row, range) in ranges.into_iter().enumerate() {
        // Trailing pads never influence real positions (their keys get zero
        // attention weight), so each row runs over its unpadded prefix only.
        let positions: Vec<usize> = batch.mask_index[range].iter().map(|&(_, c)| c).collect();
        let (rows, cache) = forward_sequence(model, peer, batch.row_tokens(row), None, &positions)
            .map_err(|e| match e {
                HailError::Numeric(m) => HailError::Numeric(format!("batch row {row}: {m}")),
                other => other,
            })?;
        out.extend(rows);
        caches.push(keep_cache.then_some(cache));
    }
    Ok((
        out,
        PeerCache {
            peer,
            rows: caches,
            coords: batch.masked_count(),
        },
    ))
}
