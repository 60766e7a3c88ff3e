//! Multi-head scaled dot-product attention with a causal mask: position `t`
//! attends to positions `0..=t` only.

use super::{axpy, dot, NnError, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCache {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Softmax rows per head, packed lower-triangular: row `t` holds `t + 1`
    /// weights starting at `t (t + 1) / 2`.
    probs: Vec<Vec<f64>>,
    len: usize,
    dim: usize,
    heads: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads {
    pub dq: Tensor,
    pub dk: Tensor,
    pub dv: Tensor,
}

pub(crate) fn check_heads(dim: usize, heads: usize) -> Result<(), NnError> {
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(NnError::HeadDivisibility { dim, heads });
    }
    Ok(())
}

/// Output row for a query against the first `n` key/value rows.
///
/// Streaming inference calls this with cached keys, so it shares arithmetic
/// with the full-sequence pass bit for bit.
pub(crate) fn attend_row(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    heads: usize,
    mut probs: Option<&mut [Vec<f64>]>,
) -> Vec<f64> {
    let dim = q.len();
    let n = k.len() / dim;
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut y = vec![0.0; dim];
    let mut p = vec![0.0; n];
    for h in 0..heads {
        let r = h * dh..(h + 1) * dh;
        let qh = &q[r.clone()];
        let mut max = f64::NEG_INFINITY;
        for (j, pj) in p.iter_mut().enumerate() {
            *pj = dot(qh, &k[j * dim + r.start..j * dim + r.end]) * scale;
            max = max.max(*pj);
        }
        let mut sum = 0.0;
        for pj in p.iter_mut() {
            *pj = (*pj - max).exp();
            sum += *pj;
        }
        let yh = &mut y[r.clone()];
        for (j, pj) in p.iter_mut().enumerate() {
            *pj /= sum;
            axpy(*pj, &v[j * dim + r.start..j * dim + r.end], yh);
        }
        if let Some(store) = probs.as_deref_mut() {
            store[h].extend_from_slice(&p);
        }
    }
    y
}

fn dims(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<(usize, usize), NnError> {
    if q.shape().len() != 2 {
        return Err(NnError::ShapeMismatch { op: "attention query", expected: vec![0, 0], got: q.shape().to_vec() });
    }
    let (t, d) = (q.shape()[0], q.shape()[1]);
    for (op, x) in [("attention key", k), ("attention value", v)] {
        if x.shape() != q.shape() {
            return Err(NnError::ShapeMismatch { op, expected: vec![t, d], got: x.shape().to_vec() });
        }
    }
    check_heads(d, heads)?;
    Ok((t, d))
}

/// Causal attention over one sequence; `q`, `k`, `v` are `[T, D]`.
pub fn causal_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<(Tensor, AttentionCache), NnError> {
    let (t, d) = dims(q, k, v, heads)?;
    let mut probs = vec![Vec::with_capacity(t * (t + 1) / 2); heads];
    let mut y = Vec::with_capacity(t * d);
    for i in 0..t {
        let row = attend_row(q.row(i), &k.data()[..(i + 1) * d], &v.data()[..(i + 1) * d], heads, Some(&mut probs));
        y.extend_from_slice(&row);
    }
    let cache = AttentionCache {
        q: q.data().to_vec(),
        k: k.data().to_vec(),
        v: v.data().to_vec(),
        probs,
        len: t,
        dim: d,
        heads,
    };
    Ok((Tensor::new(vec![t, d], y)?, cache))
}

pub fn causal_attention_backward(cache: &AttentionCache, dy: &Tensor) -> Result<AttentionGrads, NnError> {
    let AttentionCache { q, k, v, probs, len: t, dim: d, heads } = cache;
    let (t, d, heads) = (*t, *d, *heads);
    if dy.shape() != [t, d] {
        return Err(NnError::ShapeMismatch { op: "attention grad", expected: vec![t, d], got: dy.shape().to_vec() });
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; t * d];
    let mut dk = vec![0.0; t * d];
    let mut dv = vec![0.0; t * d];
    let mut dp = vec![0.0; t];
    for (h, ph) in probs.iter().enumerate() {
        let (a, b) = (h * dh, (h + 1) * dh);
        for i in 0..t {
            let p = &ph[i * (i + 1) / 2..i * (i + 1) / 2 + i + 1];
            let g = &dy.data()[i * d + a..i * d + b];
            let mut inner = 0.0;
            for j in 0..=i {
                dp[j] = dot(g, &v[j * d + a..j * d + b]);
                inner += p[j] * dp[j];
                axpy(p[j], g, &mut dv[j * d + a..j * d + b]);
            }
            let qi = &q[i * d + a..i * d + b];
            for j in 0..=i {
                let ds = p[j] * (dp[j] - inner) * scale;
                if ds != 0.0 {
                    axpy(ds, &k[j * d + a..j * d + b], &mut dq[i * d + a..i * d + b]);
                    axpy(ds, qi, &mut dk[j * d + a..j * d + b]);
                }
            }
        }
    }
    Ok(AttentionGrads {
        dq: Tensor::new(vec![t, d], dq)?,
        dk: Tensor::new(vec![t, d], dk)?,
        dv: Tensor::new(vec![t, d], dv)?,
    })
}
