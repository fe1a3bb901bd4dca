//! Attention and feed-forward building blocks composed from graph ops.

use ndarray::Array2;

use crate::error::NnError;
use crate::graph::{Graph, NodeId};

/// Projection weights for one attention block, all `(hidden, hidden)`.
#[derive(Debug, Clone, Copy)]
pub struct AttnWeights {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
}

/// Multi-head scaled dot-product attention. `mask` has shape
/// `(query_len, key_len)`; `false` entries receive exactly zero attention
/// weight. Output shape equals the query shape.
pub fn multi_head_attention(
    g: &mut Graph,
    q_in: NodeId,
    k_in: NodeId,
    v_in: NodeId,
    w: &AttnWeights,
    mask: Option<&Array2<bool>>,
    n_heads: usize,
) -> Result<NodeId, NnError> {
    let hidden = g.shape(q_in)[1];
    if n_heads == 0 || hidden % n_heads != 0 {
        return Err(NnError::shape(
            "multi_head_attention",
            format!("hidden {hidden} not divisible by {n_heads} heads"),
        ));
    }
    let lq = g.shape(q_in)[0];
    let lk = g.shape(k_in)[0];
    if let Some(mk) = mask {
        if mk.dim() != (lq, lk) {
            return Err(NnError::shape(
                "multi_head_attention",
                format!("mask {:?} vs scores ({lq}, {lk})", mk.dim()),
            ));
        }
    }
    let head_dim = hidden / n_heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let q = g.matmul(q_in, w.wq)?;
    let k = g.matmul(k_in, w.wk)?;
    let v = g.matmul(v_in, w.wv)?;

    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice_cols(q, h * head_dim, head_dim)?;
        let kh = g.slice_cols(k, h * head_dim, head_dim)?;
        let vh = g.slice_cols(v, h * head_dim, head_dim)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scaled = g.scale(scores, scale);
        let weights = g.softmax(scaled, mask)?;
        heads.push(g.matmul(weights, vh)?);
    }
    let ctx = g.concat_cols(&heads)?;
    g.matmul(ctx, w.wo)
}

/// Position-wise feed-forward: `gelu(x W1 + b1) W2 + b2`.
pub fn feed_forward(
    g: &mut Graph,
    x: NodeId,
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
) -> Result<NodeId, NnError> {
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.gelu(h);
    let out = g.matmul(h, w2)?;
    g.add_row(out, b2)
}

/// Lower-triangular self-attention mask: position i may attend to j <= i.
pub fn causal_mask(n: usize) -> Array2<bool> {
    Array2::from_shape_fn((n, n), |(i, j)| j <= i)
}

/// Mask that exposes only the keys flagged visible, for every query row.
pub fn key_mask(n_queries: usize, visible: &[bool]) -> Array2<bool> {
    Array2::from_shape_fn((n_queries, visible.len()), |(_, j)| visible[j])
}

/// Causal mask further restricted to visible keys.
pub fn causal_key_mask(n: usize, visible: &[bool]) -> Array2<bool> {
    Array2::from_shape_fn((n, n), |(i, j)| j <= i && visible[j])
}
