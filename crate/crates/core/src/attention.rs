//! Scaled dot-product attention.

use crate::error::{Error, Result};
use crate::ops;
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

/// `softmax(q·kᵀ/√d + mask)·v` on the tape. Returns `(output, weights)`.
///
/// `q` is `[.., Lq, D]`, `k` is `[.., Lk, D]`, `v` is `[.., Lk, Dv]`; `mask`
/// must broadcast against `[.., Lq, Lk]` and holds `0` or [`ops::MASK_NEG`].
pub fn sdpa(g: &mut Graph<'_>, q: Var, k: Var, v: Var, mask: Option<Var>) -> Result<(Var, Var)> {
    let d = *g.shape(q).last().expect("rank checked by matmul");
    let scores = g.matmul_t(q, k)?;
    let scores = g.scale(scores, 1.0 / libm::sqrt(d as f64));
    let scores = match mask {
        Some(m) => g.add(scores, m)?,
        None => scores,
    };
    let last = g.shape(scores).len() - 1;
    let weights = g.softmax(scores, last)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

/// Plain-tensor form of [`sdpa`].
pub fn scaled_dot_product_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    if k.rank() < 2 || v.rank() < 2 || k.dim(k.rank() - 2) != v.dim(v.rank() - 2) {
        return Err(Error::ShapeMismatch {
            op: "attention",
            lhs: k.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let mv = mask.map(|m| g.constant(m.clone()));
    let (out, _) = sdpa(&mut g, qv, kv, vv, mv)?;
    Ok(g.value(out).clone())
}

/// Lower-triangular additive mask `[len, len]` for a causal sequence.
pub fn causal_mask(len: usize) -> Tensor {
    causal_mask_offset(len, len, 0)
}

/// Mask `[queries, keys]` where query `i` sits at absolute position
/// `offset + i` and may see keys `0..=offset + i`.
pub fn causal_mask_offset(queries: usize, keys: usize, offset: usize) -> Tensor {
    let mut m = Tensor::zeros(&[queries, keys]);
    for i in 0..queries {
        for j in (offset + i + 1)..keys {
            m.data_mut()[i * keys + j] = ops::MASK_NEG;
        }
    }
    m
}
