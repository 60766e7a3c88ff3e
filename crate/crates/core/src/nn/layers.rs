use super::{expect_shape, NnError, Tensor};

/// Dot product with four interleaved partial sums; the order is fixed, so
/// results are reproducible.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `y += a * x`
#[inline]
pub(crate) fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// `y[n, out] = x[n, inp] W[out, inp]^T + b`
pub(crate) fn linear_into(x: &[f64], w: &[f64], b: &[f64], inp: usize, y: &mut [f64]) {
    let out = b.len();
    for (xr, yr) in x.chunks_exact(inp).zip(y.chunks_exact_mut(out)) {
        for ((yo, wr), bo) in yr.iter_mut().zip(w.chunks_exact(inp)).zip(b) {
            *yo = dot(xr, wr) + bo;
        }
    }
}

/// Accumulates `dW += dy^T x`, `db += sum(dy)` and, when requested,
/// `dx += dy W`.
pub(crate) fn linear_back_into(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    inp: usize,
    dx: Option<&mut [f64]>,
    dw: &mut [f64],
    db: &mut [f64],
) {
    let out = db.len();
    for (xr, dyr) in x.chunks_exact(inp).zip(dy.chunks_exact(out)) {
        for ((g, dwr), dbo) in dyr.iter().zip(dw.chunks_exact_mut(inp)).zip(db.iter_mut()) {
            if *g != 0.0 {
                axpy(*g, xr, dwr);
            }
            *dbo += g;
        }
    }
    if let Some(dx) = dx {
        for (dxr, dyr) in dx.chunks_exact_mut(inp).zip(dy.chunks_exact(out)) {
            for (g, wr) in dyr.iter().zip(w.chunks_exact(inp)) {
                if *g != 0.0 {
                    axpy(*g, wr, dxr);
                }
            }
        }
    }
}

pub(crate) fn leaky_inplace(v: &mut [f64], slope: f64) {
    for x in v {
        if *x <= 0.0 {
            *x *= slope;
        }
    }
}

/// Scales `dy` by the derivative at the pre-activation `x`.
pub(crate) fn leaky_backward_inplace(x: &[f64], dy: &mut [f64], slope: f64) {
    for (g, &xi) in dy.iter_mut().zip(x) {
        if xi <= 0.0 {
            *g *= slope;
        }
    }
}

/// Weight `[out, in]` and bias `[out]` of an affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn zeros(inp: usize, out: usize) -> Self {
        Self { w: Tensor::zeros(&[out, inp]), b: Tensor::zeros(&[out]) }
    }

    pub fn inp(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn out(&self) -> usize {
        self.w.shape()[0]
    }

    pub(crate) fn forward_into(&self, x: &[f64], y: &mut [f64]) {
        linear_into(x, self.w.data(), self.b.data(), self.inp(), y);
    }

    pub(crate) fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; x.len() / self.inp() * self.out()];
        self.forward_into(x, &mut y);
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dx` if asked.
    pub(crate) fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Linear, want_dx: bool) -> Option<Vec<f64>> {
        let mut dx = want_dx.then(|| vec![0.0; x.len()]);
        linear_back_into(x, self.w.data(), dy, self.inp(), dx.as_deref_mut(), grad.w.data_mut(), grad.b.data_mut());
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads {
    pub dx: Tensor,
    pub dw: Tensor,
    pub db: Tensor,
}

fn linear_dims(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize), NnError> {
    if w.shape().len() != 2 {
        return Err(NnError::ShapeMismatch { op: "linear", expected: vec![0, 0], got: w.shape().to_vec() });
    }
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    expect_shape("linear bias", b, &[out])?;
    if x.cols() != inp || x.shape().len() > 2 {
        return Err(NnError::ShapeMismatch {
            op: "linear input",
            expected: vec![x.rows(), inp],
            got: x.shape().to_vec(),
        });
    }
    Ok((x.rows(), inp, out))
}

fn out_shape(x: &Tensor, out: usize) -> Vec<usize> {
    if x.shape().len() == 2 {
        vec![x.rows(), out]
    } else {
        vec![out]
    }
}

/// `y = x W^T + b` for `x` of shape `[in]` or `[n, in]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, NnError> {
    let (n, inp, out) = linear_dims(x, w, b)?;
    let mut y = vec![0.0; n * out];
    linear_into(x.data(), w.data(), b.data(), inp, &mut y);
    Tensor::new(out_shape(x, out), y)
}

pub fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<LinearGrads, NnError> {
    let b = Tensor::zeros(&[w.shape().first().copied().unwrap_or(0)]);
    let (n, inp, out) = linear_dims(x, w, &b)?;
    expect_shape("linear output grad", dy, &out_shape(x, out))?;
    let mut dx = Tensor::zeros_like(x);
    let mut dw = Tensor::zeros_like(w);
    let mut db = b;
    debug_assert_eq!(dy.len(), n * out);
    linear_back_into(x.data(), w.data(), dy.data(), inp, Some(dx.data_mut()), dw.data_mut(), db.data_mut());
    Ok(LinearGrads { dx, dw, db })
}

/// `x` where positive, `slope * x` elsewhere.
pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    let mut y = x.clone();
    leaky_inplace(y.data_mut(), slope);
    y
}

/// Gradient is 1 for `x > 0` and `slope` otherwise, including at 0.
pub fn leaky_relu_backward(x: &Tensor, dy: &Tensor, slope: f64) -> Result<Tensor, NnError> {
    expect_shape("leaky_relu grad", dy, x.shape())?;
    let mut dx = dy.clone();
    leaky_backward_inplace(x.data(), dx.data_mut(), slope);
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    #[test]
    fn identity_and_hand_example() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let zero = Tensor::zeros(&[2]);
        assert_eq!(linear(&x, &eye, &zero).unwrap(), x);
        let w = Tensor::matrix(2, 2, vec![1.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(linear(&x, &w, &zero).unwrap().data(), &[3.0, 2.0]);
    }

    #[test]
    fn linear_shape_errors() {
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let w = Tensor::zeros(&[2, 2]);
        assert!(matches!(linear(&x, &w, &Tensor::zeros(&[2])), Err(NnError::ShapeMismatch { .. })));
        let x = Tensor::vector(vec![1.0, 2.0]);
        assert!(matches!(linear(&x, &w, &Tensor::zeros(&[3])), Err(NnError::ShapeMismatch { .. })));
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut s = 7;
        let x = Tensor::from_fn(&[4, 3], |_| lcg(&mut s));
        let w = Tensor::from_fn(&[2, 3], |_| lcg(&mut s));
        let b = Tensor::from_fn(&[2], |_| lcg(&mut s));
        let c = Tensor::from_fn(&[4, 2], |_| lcg(&mut s));
        // L = sum(c * y)
        let loss = |x: &Tensor, w: &Tensor, b: &Tensor| {
            linear(x, w, b).unwrap().data().iter().zip(c.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let g = linear_backward(&x, &w, &c).unwrap();
        let db: Vec<f64> = (0..2).map(|j| (0..4).map(|i| c.data()[i * 2 + j]).sum()).collect();
        assert_eq!(g.db.data(), &db[..]);
        let ex =
            grad_check(|v| loss(&Tensor::new(vec![4, 3], v.to_vec()).unwrap(), &w, &b), x.data(), g.dx.data(), 1e-5);
        let ew =
            grad_check(|v| loss(&x, &Tensor::new(vec![2, 3], v.to_vec()).unwrap(), &b), w.data(), g.dw.data(), 1e-5);
        assert!(ex < 1e-6 && ew < 1e-6, "{ex} {ew}");
    }

    #[test]
    fn leaky_values_and_gradient() {
        let x = Tensor::vector(vec![5.0, -2.0, 0.0]);
        assert_eq!(leaky_relu(&x, 0.01).data(), &[5.0, -0.02, 0.0]);
        let g = leaky_relu_backward(&x, &Tensor::vector(vec![1.0; 3]), 0.01).unwrap();
        assert_eq!(g.data(), &[1.0, 0.01, 0.01]);
        let mut s = 3;
        let pts: Vec<f64> = (0..20).map(|_| lcg(&mut s)).filter(|v| v.abs() > 1e-6).collect();
        let xt = Tensor::vector(pts.clone());
        let an = leaky_relu_backward(&xt, &Tensor::vector(vec![1.0; pts.len()]), 0.01).unwrap();
        let e =
            grad_check(|v| leaky_relu(&Tensor::vector(v.to_vec()), 0.01).data().iter().sum(), &pts, an.data(), 1e-7);
        assert!(e < 1e-6, "{e}");
    }
}
