//! Attention built from tape primitives.

use super::array::Float;
use super::tape::Var;
use super::TensorError;

/// Projection weights of one multi-head attention layer, each `[d, d]`.
pub struct MhaWeights<'a, 't, T: Float> {
    pub wq: &'a Var<'t, T>,
    pub wk: &'a Var<'t, T>,
    pub wv: &'a Var<'t, T>,
    pub wo: &'a Var<'t, T>,
}

fn split_heads<'t, T: Float>(x: &Var<'t, T>, heads: usize) -> Var<'t, T> {
    let s = x.shape();
    let (b, l, d) = (s[0], s[1], s[2]);
    x.reshape(&[b, l, heads, d / heads]).permute(&[0, 2, 1, 3])
}

/// Scaled dot-product attention over `heads` slices of the feature axis.
///
/// `q: [B, Lq, d]`, `k, v: [B, Lk, d]`, optional `mask: [B, Lq, Lk]` with
/// `true` = attendable. Per-head scores are scaled by `1/sqrt(d/heads)` and
/// masked keys get exactly zero weight.
pub fn attention<'t, T: Float>(
    q: &Var<'t, T>,
    k: &Var<'t, T>,
    v: &Var<'t, T>,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<Var<'t, T>, TensorError> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 {
        return Err(TensorError::ShapeMismatch(format!("attention expects rank-3 q/k/v, got {qs:?} {ks:?} {vs:?}")));
    }
    let (b, lq, d) = (qs[0], qs[1], qs[2]);
    let lk = ks[1];
    if ks[0] != b || vs[0] != b || ks[2] != d || vs[2] != d || vs[1] != lk {
        return Err(TensorError::ShapeMismatch(format!("attention q {qs:?} k {ks:?} v {vs:?}")));
    }
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::HeadDivisibility { dim: d, heads });
    }
    if let Some(m) = mask {
        if m.len() != b * lq * lk {
            return Err(TensorError::ShapeMismatch(format!(
                "attention mask has {} entries, expected {}",
                m.len(),
                b * lq * lk
            )));
        }
    }
    let dh = d / heads;
    let qh = split_heads(q, heads);
    let kh = split_heads(k, heads);
    let vh = split_heads(v, heads);
    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
    let scores = qh.matmul_t(&kh).scale(scale);
    let full_mask: Vec<bool> = match mask {
        Some(m) => {
            let mut out = Vec::with_capacity(b * heads * lq * lk);
            for bi in 0..b {
                let block = &m[bi * lq * lk..(bi + 1) * lq * lk];
                for _ in 0..heads {
                    out.extend_from_slice(block);
                }
            }
            out
        }
        None => vec![true; b * heads * lq * lk],
    };
    let weights = scores.masked_softmax(&full_mask, T::one())?;
    let out = weights.matmul(&vh);
    Ok(out.permute(&[0, 2, 1, 3]).reshape(&[b, lq, d]))
}

/// Multi-head attention with input and output projections (no biases).
pub fn mha<'t, T: Float>(
    q: &Var<'t, T>,
    k: &Var<'t, T>,
    v: &Var<'t, T>,
    weights: &MhaWeights<'_, 't, T>,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<Var<'t, T>, TensorError> {
    let attended = attention(&q.matmul(weights.wq), &k.matmul(weights.wk), &v.matmul(weights.wv), heads, mask)?;
    Ok(attended.matmul(weights.wo))
}
