//! Gated recurrent unit with gate rows ordered reset, update, candidate:
//!
//! ```text
//! r  = σ(W_ir x + b_ir + W_hr h + b_hr)
//! z  = σ(W_iz x + b_iz + W_hz h + b_hz)
//! n  = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))
//! h' = (1 − z) ⊙ h + z ⊙ n
//! ```

use super::{expect_shape, linear_back_into, linear_into, sigmoid, NnError, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    /// `[3H, I]`
    pub w_ih: Tensor,
    /// `[3H, H]`
    pub w_hh: Tensor,
    pub b_ih: Tensor,
    pub b_hh: Tensor,
}

/// Activations of one step, enough to run it backwards.
#[derive(Debug, Clone, PartialEq)]
pub struct GruCache {
    pub(crate) x: Vec<f64>,
    pub(crate) h: Vec<f64>,
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    gh_n: Vec<f64>,
}

impl GruParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_ih: Tensor::zeros(&[3 * hidden, input]),
            w_hh: Tensor::zeros(&[3 * hidden, hidden]),
            b_ih: Tensor::zeros(&[3 * hidden]),
            b_hh: Tensor::zeros(&[3 * hidden]),
        }
    }

    pub fn input(&self) -> usize {
        self.w_ih.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.shape()[1]
    }

    fn check(&self) -> Result<(), NnError> {
        let (i, h) = (self.input(), self.hidden());
        expect_shape("gru w_ih", &self.w_ih, &[3 * h, i])?;
        expect_shape("gru w_hh", &self.w_hh, &[3 * h, h])?;
        expect_shape("gru b_ih", &self.b_ih, &[3 * h])?;
        expect_shape("gru b_hh", &self.b_hh, &[3 * h])
    }

    /// One step over a batch of rows; `x` is `[B, I]`, `h` is `[B, H]`.
    pub(crate) fn step(&self, x: &[f64], h: &[f64]) -> (Vec<f64>, GruCache) {
        let hd = self.hidden();
        let b = h.len() / hd;
        let mut gi = vec![0.0; b * 3 * hd];
        let mut gh = vec![0.0; b * 3 * hd];
        linear_into(x, self.w_ih.data(), self.b_ih.data(), self.input(), &mut gi);
        linear_into(h, self.w_hh.data(), self.b_hh.data(), hd, &mut gh);
        let mut r = vec![0.0; b * hd];
        let mut z = vec![0.0; b * hd];
        let mut n = vec![0.0; b * hd];
        let mut gh_n = vec![0.0; b * hd];
        let mut out = vec![0.0; b * hd];
        for s in 0..b {
            let gi = &gi[s * 3 * hd..(s + 1) * 3 * hd];
            let gh = &gh[s * 3 * hd..(s + 1) * 3 * hd];
            for j in 0..hd {
                let k = s * hd + j;
                r[k] = sigmoid(gi[j] + gh[j]);
                z[k] = sigmoid(gi[hd + j] + gh[hd + j]);
                gh_n[k] = gh[2 * hd + j];
                n[k] = (gi[2 * hd + j] + r[k] * gh_n[k]).tanh();
                out[k] = (1.0 - z[k]) * h[k] + z[k] * n[k];
            }
        }
        let cache = GruCache { x: x.to_vec(), h: h.to_vec(), r, z, n, gh_n };
        (out, cache)
    }

    /// Backward through one step. Accumulates into `grad`; returns `dx` (if
    /// requested) and the gradient with respect to the previous state.
    pub(crate) fn step_backward(
        &self,
        c: &GruCache,
        dout: &[f64],
        grad: &mut GruParams,
        want_dx: bool,
    ) -> (Option<Vec<f64>>, Vec<f64>) {
        let hd = self.hidden();
        let b = c.h.len() / hd;
        let mut dgi = vec![0.0; b * 3 * hd];
        let mut dgh = vec![0.0; b * 3 * hd];
        let mut dh = vec![0.0; b * hd];
        for s in 0..b {
            for j in 0..hd {
                let k = s * hd + j;
                let g = dout[k];
                let (r, z, n) = (c.r[k], c.z[k], c.n[k]);
                dh[k] = g * (1.0 - z);
                let dz = g * (n - c.h[k]);
                let dan = g * z * (1.0 - n * n);
                let dar = dan * c.gh_n[k] * r * (1.0 - r);
                let daz = dz * z * (1.0 - z);
                let o = s * 3 * hd;
                dgi[o + j] = dar;
                dgi[o + hd + j] = daz;
                dgi[o + 2 * hd + j] = dan;
                dgh[o + j] = dar;
                dgh[o + hd + j] = daz;
                dgh[o + 2 * hd + j] = dan * r;
            }
        }
        let mut dx = want_dx.then(|| vec![0.0; c.x.len()]);
        linear_back_into(
            &c.x,
            self.w_ih.data(),
            &dgi,
            self.input(),
            dx.as_deref_mut(),
            grad.w_ih.data_mut(),
            grad.b_ih.data_mut(),
        );
        linear_back_into(&c.h, self.w_hh.data(), &dgh, hd, Some(&mut dh), grad.w_hh.data_mut(), grad.b_hh.data_mut());
        (dx, dh)
    }
}

fn check_inputs(p: &GruParams, x: &Tensor, h: &Tensor) -> Result<(), NnError> {
    p.check()?;
    let b = h.rows();
    if h.cols() != p.hidden() {
        return Err(NnError::ShapeMismatch { op: "gru state", expected: vec![b, p.hidden()], got: h.shape().to_vec() });
    }
    if x.cols() != p.input() || x.rows() != b {
        return Err(NnError::ShapeMismatch { op: "gru input", expected: vec![b, p.input()], got: x.shape().to_vec() });
    }
    Ok(())
}

/// One GRU step; `x` is `[B, I]` (or `[I]`) and `h_prev` is `[B, H]` (or `[H]`).
pub fn gru_cell(x: &Tensor, h_prev: &Tensor, params: &GruParams) -> Result<(Tensor, GruCache), NnError> {
    check_inputs(params, x, h_prev)?;
    let (h, cache) = params.step(x.data(), h_prev.data());
    Ok((Tensor::new(h_prev.shape().to_vec(), h)?, cache))
}

/// Returns `(dx, dh_prev)` and accumulates parameter gradients into `grads`.
pub fn gru_cell_backward(
    params: &GruParams,
    cache: &GruCache,
    dh: &Tensor,
    grads: &mut GruParams,
) -> Result<(Tensor, Tensor), NnError> {
    if dh.len() != cache.h.len() {
        return Err(NnError::ShapeMismatch { op: "gru grad", expected: vec![cache.h.len()], got: dh.shape().to_vec() });
    }
    let (dx, dhp) = params.step_backward(cache, dh.data(), grads, true);
    let b = dh.rows();
    let xshape = if dh.shape().len() == 2 { vec![b, params.input()] } else { vec![params.input()] };
    Ok((Tensor::new(xshape, dx.unwrap_or_default())?, Tensor::new(dh.shape().to_vec(), dhp)?))
}

/// Unrolls the cell over `xs`, returning every state and cache.
pub fn gru_sequence(xs: &[Tensor], h0: &Tensor, params: &GruParams) -> Result<(Vec<Tensor>, Vec<GruCache>), NnError> {
    let mut h = h0.clone();
    let mut states = Vec::with_capacity(xs.len());
    let mut caches = Vec::with_capacity(xs.len());
    for x in xs {
        let (next, c) = gru_cell(x, &h, params)?;
        states.push(next.clone());
        caches.push(c);
        h = next;
    }
    Ok((states, caches))
}

/// Backpropagation through time. `dhs[t]` is the loss gradient with respect
/// to state `t`; returns input gradients, the initial-state gradient and the
/// parameter gradients.
pub fn gru_sequence_backward(
    params: &GruParams,
    caches: &[GruCache],
    dhs: &[Tensor],
) -> Result<(Vec<Tensor>, Tensor, GruParams), NnError> {
    if caches.len() != dhs.len() || caches.is_empty() {
        return Err(NnError::ShapeMismatch { op: "gru bptt", expected: vec![caches.len()], got: vec![dhs.len()] });
    }
    let mut grads = GruParams::zeros(params.input(), params.hidden());
    let mut carry = Tensor::zeros_like(&dhs[0]);
    let mut dxs = vec![Tensor::zeros(&[0]); caches.len()];
    for t in (0..caches.len()).rev() {
        let mut dh = dhs[t].clone();
        dh.add_assign(&carry);
        let (dx, dhp) = gru_cell_backward(params, &caches[t], &dh, &mut grads)?;
        dxs[t] = dx;
        carry = dhp;
    }
    Ok((dxs, carry, grads))
}
