//! Forward and backward passes for the three model families, plus the
//! incremental state used for streaming inference.

use super::{Block, Body, ModelError, ModelKind, ModelParams, Normalization, INPUT_DIM};
use crate::nn::{
    attend_row, causal_attention, causal_attention_backward, huber_slices, leaky_backward_inplace, leaky_inplace,
    linear_back_into, linear_into, AttentionCache, GruCache, Linear, Tensor,
};
use crate::types::SENSORS;

pub(crate) fn scaled_input(norm: &Normalization, x: &[f64]) -> Vec<f64> {
    let inv = norm.x_scale.map(|s| 1.0 / s);
    x.iter().enumerate().map(|(i, v)| v * inv[i % SENSORS]).collect()
}

fn check_windows(x: &[f64]) -> Result<usize, ModelError> {
    if x.is_empty() || !x.len().is_multiple_of(INPUT_DIM) {
        let got = x.len();
        return Err(ModelError::ShapeMismatch { expected: INPUT_DIM * got.div_ceil(INPUT_DIM).max(1), got });
    }
    Ok(x.len() / INPUT_DIM)
}

/// Decoder head: `y_scale * leaky(dec(h))`. Returns predictions and the
/// decoder pre-activations.
fn head(m: &ModelParams, top: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let pre = m.decoder.forward(top);
    let mut out = pre.clone();
    leaky_inplace(&mut out, m.spec.leaky_slope);
    for v in &mut out {
        *v *= m.norm.y_scale;
    }
    (out, pre)
}

/// Backward through the head; returns the gradient at its input.
fn head_backward(m: &ModelParams, top: &[f64], pre: &[f64], dpred: &[f64], grad: &mut ModelParams) -> Vec<f64> {
    let mut d: Vec<f64> = dpred.iter().map(|g| g * m.norm.y_scale).collect();
    leaky_backward_inplace(pre, &mut d, m.spec.leaky_slope);
    m.decoder.backward(top, &d, &mut grad.decoder, true).unwrap_or_default()
}

fn encode(m: &ModelParams, x: &[f64], activate: bool) -> (Vec<f64>, Vec<f64>) {
    let pre = m.encoder.forward(x);
    let mut post = pre.clone();
    if activate {
        leaky_inplace(&mut post, m.spec.leaky_slope);
    }
    (pre, post)
}

// ---------------------------------------------------------------- FCN

pub(crate) struct FcnCache {
    x: Vec<f64>,
    /// Pre-activations of the encoder and each hidden layer.
    pre: Vec<Vec<f64>>,
    /// Matching post-activations.
    post: Vec<Vec<f64>>,
    out_pre: Vec<f64>,
}

fn fcn_layers(m: &ModelParams) -> &[Linear] {
    match &m.body {
        Body::Fcn(ls) => ls,
        _ => unreachable!("checked by caller"),
    }
}

/// `x` holds raw (unscaled) windows, one per row.
pub(crate) fn fcn_forward(m: &ModelParams, x: &[f64]) -> (Vec<f64>, FcnCache) {
    let x = scaled_input(&m.norm, x);
    let slope = m.spec.leaky_slope;
    let (p0, h0) = encode(m, &x, true);
    let mut pre = vec![p0];
    let mut post = vec![h0];
    for l in fcn_layers(m) {
        let a = l.forward(post.last().unwrap());
        let mut h = a.clone();
        leaky_inplace(&mut h, slope);
        pre.push(a);
        post.push(h);
    }
    let (out, out_pre) = head(m, post.last().unwrap());
    (out, FcnCache { x, pre, post, out_pre })
}

pub(crate) fn fcn_backward(m: &ModelParams, c: &FcnCache, dpred: &[f64], grad: &mut ModelParams) {
    let slope = m.spec.leaky_slope;
    let mut dh = head_backward(m, c.post.last().unwrap(), &c.out_pre, dpred, grad);
    let Body::Fcn(gl) = &mut grad.body else { unreachable!() };
    for (i, l) in fcn_layers(m).iter().enumerate().rev() {
        leaky_backward_inplace(&c.pre[i + 1], &mut dh, slope);
        dh = l.backward(&c.post[i], &dh, &mut gl[i], true).unwrap_or_default();
    }
    leaky_backward_inplace(&c.pre[0], &mut dh, slope);
    m.encoder.backward(&c.x, &dh, &mut grad.encoder, false);
}

// ---------------------------------------------------------------- RNN

pub(crate) struct RnnStepCache {
    x: Vec<f64>,
    enc_pre: Vec<f64>,
    gru: Vec<GruCache>,
    top: Vec<f64>,
    out_pre: Vec<f64>,
    pub(crate) rows: usize,
}

fn grus(m: &ModelParams) -> &[crate::nn::GruParams] {
    match &m.body {
        Body::Rnn(gs) => gs,
        _ => unreachable!("checked by caller"),
    }
}

/// Advances the first `rows` sequences of the batch by one window. `state`
/// holds one `[B, H]` buffer per layer.
pub(crate) fn rnn_step(m: &ModelParams, x: &[f64], state: &mut [Vec<f64>], rows: usize) -> (Vec<f64>, RnnStepCache) {
    let h = m.spec.hidden;
    let x = scaled_input(&m.norm, x);
    let (enc_pre, mut inp) = encode(m, &x, true);
    let mut caches = Vec::with_capacity(state.len());
    for (g, s) in grus(m).iter().zip(state.iter_mut()) {
        let (next, c) = g.step(&inp, &s[..rows * h]);
        s[..rows * h].copy_from_slice(&next);
        caches.push(c);
        inp = next;
    }
    let (out, out_pre) = head(m, &inp);
    (out, RnnStepCache { x, enc_pre, gru: caches, top: inp, out_pre, rows })
}

/// Backward through a run of steps; `carry` holds the gradient arriving from
/// beyond the last step (zeros for truncated BPTT).
pub(crate) fn rnn_backward(
    m: &ModelParams,
    caches: &[RnnStepCache],
    dpreds: &[Vec<f64>],
    carry: &mut [Vec<f64>],
    grad: &mut ModelParams,
) {
    let h = m.spec.hidden;
    let slope = m.spec.leaky_slope;
    for (c, dp) in caches.iter().zip(dpreds).rev() {
        let n = c.rows * h;
        let mut dh = head_backward(m, &c.top, &c.out_pre, dp, grad);
        let Body::Rnn(gg) = &mut grad.body else { unreachable!() };
        for (l, g) in grus(m).iter().enumerate().rev() {
            for (d, k) in dh.iter_mut().zip(&carry[l][..n]) {
                *d += k;
            }
            let (dx, dprev) = g.step_backward(&c.gru[l], &dh, &mut gg[l], true);
            carry[l][..n].copy_from_slice(&dprev);
            dh = dx.unwrap_or_default();
        }
        leaky_backward_inplace(&c.enc_pre, &mut dh, slope);
        m.encoder.backward(&c.x, &dh, &mut grad.encoder, false);
    }
}

// ---------------------------------------------------------------- Transformer

fn positional(pos: usize, dim: usize, out: &mut [f64]) {
    for (i, v) in out.iter_mut().enumerate().take(dim) {
        let freq = 1.0 / 10000f64.powf((i - i % 2) as f64 / dim as f64);
        let a = pos as f64 * freq;
        *v += if i % 2 == 0 { a.sin() } else { a.cos() };
    }
}

fn blocks(m: &ModelParams) -> &[Block] {
    match &m.body {
        Body::Transformer(bs) => bs,
        _ => unreachable!("checked by caller"),
    }
}

pub(crate) struct BlockCache {
    e: Vec<f64>,
    attn: AttentionCache,
    a: Vec<f64>,
    e1: Vec<f64>,
    f1: Vec<f64>,
    g: Vec<f64>,
}

pub(crate) struct TfmCache {
    x: Vec<f64>,
    blocks: Vec<BlockCache>,
    top: Vec<f64>,
    out_pre: Vec<f64>,
}

fn key(b: &Block, e: &[f64]) -> Vec<f64> {
    let h = b.k.shape()[0];
    let mut out = vec![0.0; e.len()];
    linear_into(e, b.k.data(), &vec![0.0; h], h, &mut out);
    out
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Feed-forward half of a block for any number of rows.
fn feed_forward(b: &Block, e1: &[f64], slope: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let f1 = b.ff1.forward(e1);
    let mut g = f1.clone();
    leaky_inplace(&mut g, slope);
    let e2 = add(e1, &b.ff2.forward(&g));
    (f1, g, e2)
}

/// One sequence of `T` raw windows.
pub(crate) fn tfm_forward(m: &ModelParams, x: &[f64]) -> (Vec<f64>, TfmCache) {
    let (h, slope, heads) = (m.spec.hidden, m.spec.leaky_slope, m.spec.heads);
    let x = scaled_input(&m.norm, x);
    let t = x.len() / INPUT_DIM;
    let (_, mut e) = encode(m, &x, false);
    for (p, row) in e.chunks_exact_mut(h).enumerate() {
        positional(p, h, row);
    }
    let mut caches = Vec::with_capacity(m.spec.layers);
    for b in blocks(m) {
        let mk = |v: Vec<f64>| Tensor::matrix(t, h, v).expect("row-major [T, H]");
        let (q, k, v) = (mk(b.q.forward(&e)), mk(key(b, &e)), mk(b.v.forward(&e)));
        let (a, attn) = causal_attention(&q, &k, &v, heads).expect("heads validated with spec");
        let a = a.into_data();
        let e1 = add(&e, &b.o.forward(&a));
        let (f1, g, e2) = feed_forward(b, &e1, slope);
        caches.push(BlockCache { e, attn, a, e1, f1, g });
        e = e2;
    }
    let (out, out_pre) = head(m, &e);
    (out, TfmCache { x, blocks: caches, top: e, out_pre })
}

pub(crate) fn tfm_backward(m: &ModelParams, c: &TfmCache, dpred: &[f64], grad: &mut ModelParams) {
    let (h, slope) = (m.spec.hidden, m.spec.leaky_slope);
    let t = dpred.len();
    let mut de = head_backward(m, &c.top, &c.out_pre, dpred, grad);
    let Body::Transformer(gb) = &mut grad.body else { unreachable!() };
    for ((b, bc), g) in blocks(m).iter().zip(&c.blocks).zip(gb.iter_mut()).rev() {
        // e2 = e1 + ff2(leaky(ff1(e1)))
        let mut dg = b.ff2.backward(&bc.g, &de, &mut g.ff2, true).unwrap_or_default();
        leaky_backward_inplace(&bc.f1, &mut dg, slope);
        let d_ff = b.ff1.backward(&bc.e1, &dg, &mut g.ff1, true).unwrap_or_default();
        let de1 = add(&de, &d_ff);
        // e1 = e + o(attn(q(e), k(e), v(e)))
        let da = b.o.backward(&bc.a, &de1, &mut g.o, true).unwrap_or_default();
        let da = Tensor::matrix(t, h, da).expect("row-major [T, H]");
        let ag = causal_attention_backward(&bc.attn, &da).expect("shapes come from the forward pass");
        let mut d = de1;
        let mut unused_bias = vec![0.0; h];
        linear_back_into(&bc.e, b.k.data(), ag.dk.data(), h, Some(&mut d), g.k.data_mut(), &mut unused_bias);
        for (lin, gl, dy) in [(&b.q, &mut g.q, &ag.dq), (&b.v, &mut g.v, &ag.dv)] {
            let dx = lin.backward(&bc.e, dy.data(), gl, true).unwrap_or_default();
            for (a, b) in d.iter_mut().zip(&dx) {
                *a += b;
            }
        }
        de = d;
    }
    m.encoder.backward(&c.x, &de, &mut grad.encoder, false);
}

// ---------------------------------------------------------------- public API

/// Force for a single window under the instantaneous formulation.
/// Mean Huber loss of the model over one batch of windows (FCN) or one
/// sequence run from its start (GRU, Transformer), with its gradient.
pub fn loss_and_gradient(
    m: &ModelParams,
    xs: &[f64],
    ys: &[f64],
    delta: f64,
) -> Result<(f64, ModelParams), ModelError> {
    let t = check_windows(xs)?;
    if ys.len() != t {
        return Err(ModelError::ShapeMismatch { expected: t, got: ys.len() });
    }
    let mut g = m.zeros_like();
    let loss = match m.spec.kind {
        ModelKind::Fcn => {
            let (p, c) = fcn_forward(m, xs);
            let (loss, d) = huber_slices(&p, ys, delta);
            fcn_backward(m, &c, &d, &mut g);
            loss
        }
        ModelKind::Rnn => {
            let mut st = vec![vec![0.0; m.spec.hidden]; m.spec.layers];
            let (p, cs): (Vec<f64>, Vec<_>) = xs
                .chunks(INPUT_DIM)
                .map(|w| {
                    let (o, c) = rnn_step(m, w, &mut st, 1);
                    (o[0], c)
                })
                .unzip();
            let (loss, d) = huber_slices(&p, ys, delta);
            let dp: Vec<Vec<f64>> = d.iter().map(|v| vec![*v]).collect();
            let mut carry = vec![vec![0.0; m.spec.hidden]; m.spec.layers];
            rnn_backward(m, &cs, &dp, &mut carry, &mut g);
            loss
        }
        ModelKind::Transformer => {
            let (p, c) = tfm_forward(m, xs);
            let (loss, d) = huber_slices(&p, ys, delta);
            tfm_backward(m, &c, &d, &mut g);
            loss
        }
    };
    Ok((loss, g))
}

pub fn predict_instant(model: &ModelParams, x: &[f64]) -> Result<f64, ModelError> {
    if model.spec.kind != ModelKind::Fcn {
        return Err(ModelError::KindMismatch { expected: "fcn", got: model.spec.kind });
    }
    if x.len() != INPUT_DIM {
        return Err(ModelError::ShapeMismatch { expected: INPUT_DIM, got: x.len() });
    }
    Ok(fcn_forward(model, x).0[0])
}

/// Causal forces for consecutive windows of one episode (`T x 300` values).
pub fn predict_sequence(model: &ModelParams, xs: &[f64]) -> Result<Vec<f64>, ModelError> {
    check_windows(xs)?;
    match model.spec.kind {
        ModelKind::Fcn => Err(ModelError::KindMismatch { expected: "rnn or transformer", got: ModelKind::Fcn }),
        ModelKind::Rnn => {
            let mut s = StreamState::new(model);
            xs.chunks_exact(INPUT_DIM).map(|w| s.push(w)).collect()
        }
        ModelKind::Transformer => Ok(tfm_forward(model, xs).0),
    }
}

/// Forces for consecutive windows with whichever formulation the model uses.
pub fn predict_windows(model: &ModelParams, xs: &[f64]) -> Result<Vec<f64>, ModelError> {
    check_windows(xs)?;
    match model.spec.kind {
        ModelKind::Fcn => Ok(xs.chunks(INPUT_DIM * 1024).flat_map(|chunk| fcn_forward(model, chunk).0).collect()),
        _ => predict_sequence(model, xs),
    }
}

enum Inner {
    Fcn,
    Rnn(Vec<Vec<f64>>),
    /// Cached keys and values per block.
    Transformer(Vec<(Vec<f64>, Vec<f64>)>),
}

/// Window-by-window inference that keeps only what later windows need: the
/// recurrent state for the GRU and the key/value history for the
/// Transformer. Outputs match [`predict_windows`] bit for bit.
pub struct StreamState<'a> {
    model: &'a ModelParams,
    pos: usize,
    inner: Inner,
}

impl<'a> StreamState<'a> {
    pub fn new(model: &'a ModelParams) -> Self {
        let h = model.spec.hidden;
        let inner = match &model.body {
            Body::Fcn(_) => Inner::Fcn,
            Body::Rnn(gs) => Inner::Rnn(vec![vec![0.0; h]; gs.len()]),
            Body::Transformer(bs) => Inner::Transformer(vec![(Vec::new(), Vec::new()); bs.len()]),
        };
        Self { model, pos: 0, inner }
    }

    /// Windows consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn push(&mut self, window: &[f64]) -> Result<f64, ModelError> {
        if window.len() != INPUT_DIM {
            return Err(ModelError::ShapeMismatch { expected: INPUT_DIM, got: window.len() });
        }
        let m = self.model;
        let out = match &mut self.inner {
            Inner::Fcn => fcn_forward(m, window).0[0],
            Inner::Rnn(state) => rnn_step(m, window, state, 1).0[0],
            Inner::Transformer(kv) => {
                let (slope, heads) = (m.spec.leaky_slope, m.spec.heads);
                let x = scaled_input(&m.norm, window);
                let (_, mut e) = encode(m, &x, false);
                positional(self.pos, m.spec.hidden, &mut e);
                for (b, (kc, vc)) in blocks(m).iter().zip(kv.iter_mut()) {
                    let q = b.q.forward(&e);
                    kc.extend(key(b, &e));
                    vc.extend(b.v.forward(&e));
                    let a = attend_row(&q, kc, vc, heads, None);
                    let e1 = add(&e, &b.o.forward(&a));
                    e = feed_forward(b, &e1, slope).2;
                }
                head(m, &e).0[0]
            }
        };
        self.pos += 1;
        Ok(out)
    }
}
