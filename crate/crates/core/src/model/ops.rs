//! Tape-level building blocks of the forward pass: per-view GNN propagation,
//! the view-fusion Transformer encoder, item enrichment, top-item selection,
//! and cross-attention refinement.

use std::sync::Arc;

use rayon::prelude::*;

use super::{CrossAttnVars, EncoderLayerVars, GnnVars, HeadVars, ModelDims, ModelError};
use crate::autodiff::tensor::matmul_nt;
use crate::autodiff::{Tape, Tensor, TensorError, Var};
use crate::sparse::SparseMatrix;

/// Two rounds of neighbor aggregation with a residual ReLU update, then row
/// normalization. Per layer: h_new = α·h + Σ_v w_uv·h_v; h ← h + relu(h_new·W).
/// With layer attention enabled, the final state is replaced by a softmax
/// mixture of all layer states before normalizing.
pub fn user_gnn_forward(
    tape: &mut Tape,
    emb: Var,
    adj: &Arc<SparseMatrix>,
    p: &GnnVars,
    layer_attention: bool,
) -> Result<Var, TensorError> {
    let mut h = emb;
    let mut states = vec![h];
    for &w in &p.weights {
        let self_part = tape.scale_by(h, p.alpha)?;
        let neigh = tape.spmm(adj.clone(), h)?;
        let h_new = tape.add(self_part, neigh)?;
        let lin = tape.matmul(h_new, w)?;
        let act = tape.relu(lin);
        h = tape.add(h, act)?;
        states.push(h);
    }
    let combined = if layer_attention {
        let mix = tape.softmax_last(p.layer_scalars);
        tape.weighted_sum(&states, mix)?
    } else {
        h
    };
    tape.l2_normalize_rows(combined)
}

/// x·W + b for a rank-3 x and rank-2 W, via a flatten round trip.
fn linear3(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
    let xs = tape.value(x).shape().to_vec();
    let m = tape.value(w).shape()[1];
    let flat = tape.reshape(x, vec![xs[0] * xs[1], xs[2]])?;
    let y = tape.matmul(flat, w)?;
    let y = tape.reshape(y, vec![xs[0], xs[1], m])?;
    tape.add(y, b)
}

/// One scaled-dot-product attention head: queries from `q_src`, keys and
/// values from `kv_src`, both rank-3 with matching batch axes.
fn attention_head(
    tape: &mut Tape,
    q_src: Var,
    kv_src: Var,
    h: &HeadVars,
    head_dim: usize,
) -> Result<Var, TensorError> {
    let q = linear3(tape, q_src, h.wq, h.bq)?;
    let k = linear3(tape, kv_src, h.wk, h.bk)?;
    let v = linear3(tape, kv_src, h.wv, h.bv)?;
    let scores = tape.bmm_rhs_transposed(q, k)?;
    let scaled = tape.scale(scores, 1.0 / (head_dim as f64).sqrt());
    let attn = tape.softmax_last(scaled);
    tape.bmm(attn, v)
}

fn encoder_layer(
    tape: &mut Tape,
    x: Var,
    p: &EncoderLayerVars,
    dims: &ModelDims,
) -> Result<Var, TensorError> {
    let heads: Vec<Var> = p
        .heads
        .iter()
        .map(|h| attention_head(tape, x, x, h, dims.head_dim()))
        .collect::<Result<_, _>>()?;
    let concat = tape.concat_last(&heads)?;
    let proj = linear3(tape, concat, p.wo, p.bo)?;
    let proj = tape.dropout(proj, dims.dropout);
    let res1 = tape.add(x, proj)?;
    let x1 = tape.layer_norm(res1, p.ln1_gamma, p.ln1_beta)?;

    let hidden = linear3(tape, x1, p.ff1, p.bf1)?;
    let hidden = tape.relu(hidden);
    let out = linear3(tape, hidden, p.ff2, p.bf2)?;
    let out = tape.dropout(out, dims.dropout);
    let res2 = tape.add(x1, out)?;
    tape.layer_norm(res2, p.ln2_gamma, p.ln2_beta)
}

/// Fuse per-view user embeddings: treat the views as an unordered sequence
/// (no positional encoding), encode, and mean-pool over the view axis.
pub fn fuse_views(
    tape: &mut Tape,
    views: &[Var],
    encoder: &[EncoderLayerVars],
    dims: &ModelDims,
) -> Result<Var, TensorError> {
    let stacked = tape.stack(views)?; // [v, n, d]
    let mut x = tape.transpose01(stacked)?; // [n, v, d]
    for layer in encoder {
        x = encoder_layer(tape, x, layer, dims)?;
    }
    Ok(tape.mean_axis(x, 1))
}

/// I' = normalize(I + Rᵀ·U): each item absorbs the rating-weighted sum of
/// its raters' fused embeddings.
pub fn enrich_items(
    tape: &mut Tape,
    item_emb: Var,
    rating_t: Arc<SparseMatrix>,
    fused_users: Var,
) -> Result<Var, TensorError> {
    let prop = tape.spmm(rating_t, fused_users)?;
    let sum = tape.add(item_emb, prop)?;
    tape.l2_normalize_rows(sum)
}

/// Per user, the k items with the highest inner product against the fused
/// embedding, ties to the lower index. Plain values: gradients never flow
/// through the selection.
pub fn select_top_items(
    users: &Tensor,
    items: &Tensor,
    k: usize,
) -> Result<Vec<Vec<u32>>, ModelError> {
    let num_items = items.shape()[0];
    if k > num_items {
        return Err(ModelError::TopKTooLarge { k, num_items });
    }
    let (n, d) = (users.shape()[0], users.shape()[1]);
    let mut scores = vec![0.0; n * num_items];
    matmul_nt(users.data(), items.data(), n, d, num_items, &mut scores);
    Ok((0..n)
        .into_par_iter()
        .map(|u| {
            let row = &scores[u * num_items..(u + 1) * num_items];
            let mut idx: Vec<u32> = (0..num_items as u32).collect();
            idx.sort_by(|&a, &b| row[b as usize].total_cmp(&row[a as usize]).then(a.cmp(&b)));
            idx.truncate(k);
            idx
        })
        .collect())
}

/// Attend from each user's fused embedding over their selected items and
/// fold the result back: u* = normalize(u + z·W_c).
pub fn cross_attention_refine(
    tape: &mut Tape,
    fused_users: Var,
    enriched_items: Var,
    top_items: &[Vec<u32>],
    p: &CrossAttnVars,
    dims: &ModelDims,
) -> Result<Var, TensorError> {
    let (n, d) = {
        let s = tape.value(fused_users).shape();
        (s[0], s[1])
    };
    let k = top_items.first().map_or(0, Vec::len);
    let flat: Vec<u32> = top_items.iter().flatten().copied().collect();
    debug_assert_eq!(flat.len(), n * k);
    let gathered = tape.gather_rows(enriched_items, &flat)?;
    let keys = tape.reshape(gathered, vec![n, k, d])?;
    let queries = tape.reshape(fused_users, vec![n, 1, d])?;
    let heads: Vec<Var> = p
        .heads
        .iter()
        .map(|h| attention_head(tape, queries, keys, h, dims.head_dim()))
        .collect::<Result<_, _>>()?;
    let z3 = tape.concat_last(&heads)?;
    let z = tape.reshape(z3, vec![n, d])?;
    let proj = tape.matmul(z, p.wc)?;
    let sum = tape.add(fused_users, proj)?;
    tape.l2_normalize_rows(sum)
}
