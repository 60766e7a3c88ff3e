//! Not-a-knot cubic spline interpolation over irregular abscissae.
//!
//! The not-a-knot end condition forces the third derivative to be continuous
//! at the second and second-to-last knots, so any cubic polynomial is
//! reproduced exactly.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SplineError {
    #[error("need at least 4 samples, got {0}")]
    TooFewSamples(usize),
    #[error("abscissae not strictly increasing at index {0}")]
    NonMonotonic(usize),
    #[error("got {ys} ordinates for {xs} abscissae")]
    LengthMismatch { xs: usize, ys: usize },
}

/// Knots plus the LU factors of the moment system; shared by every channel
/// sampled on the same abscissae.
#[derive(Debug, Clone)]
pub struct SplineBasis {
    x: Vec<f64>,
    h: Vec<f64>,
    // Thomas factors of the reduced system on moments 1..n-1.
    sub: Vec<f64>,
    diag: Vec<f64>,
    sup: Vec<f64>,
}

impl SplineBasis {
    pub fn new(x: &[f64]) -> Result<Self, SplineError> {
        let n = x.len();
        if n < 4 {
            return Err(SplineError::TooFewSamples(n));
        }
        if let Some(i) = (1..n).find(|&i| !(x[i] > x[i - 1])) {
            return Err(SplineError::NonMonotonic(i));
        }
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let m = n - 2;
        let mut sub = vec![0.0; m];
        let mut diag = vec![0.0; m];
        let mut sup = vec![0.0; m];
        for r in 0..m {
            let i = r + 1;
            sub[r] = h[i - 1];
            diag[r] = 2.0 * (h[i - 1] + h[i]);
            sup[r] = h[i];
        }
        // Eliminate M_0 = ((h0 + h1) M_1 - h0 M_2) / h1 from the first row.
        let (h0, h1) = (h[0], h[1]);
        diag[0] += h0 * (h0 + h1) / h1;
        sup[0] -= h0 * h0 / h1;
        sub[0] = 0.0;
        // And M_{n-1} = ((a + b) M_{n-2} - b M_{n-3}) / a at the other end,
        // with a = h[n-3], b = h[n-2].
        let (a, b) = (h[n - 3], h[n - 2]);
        diag[m - 1] += b * (a + b) / a;
        sub[m - 1] -= b * b / a;
        sup[m - 1] = 0.0;
        // Forward sweep; store the modified diagonal and multipliers.
        for r in 1..m {
            let w = sub[r] / diag[r - 1];
            sub[r] = w;
            diag[r] -= w * sup[r - 1];
        }
        Ok(Self { x: x.to_vec(), h, sub, diag, sup })
    }

    pub fn knots(&self) -> &[f64] {
        &self.x
    }

    /// Second derivatives at every knot for the ordinates `y`.
    pub fn moments(&self, y: &[f64]) -> Result<Vec<f64>, SplineError> {
        let n = self.x.len();
        if y.len() != n {
            return Err(SplineError::LengthMismatch { xs: n, ys: y.len() });
        }
        let h = &self.h;
        let m = n - 2;
        let mut rhs: Vec<f64> =
            (1..n - 1).map(|i| 6.0 * ((y[i + 1] - y[i]) / h[i] - (y[i] - y[i - 1]) / h[i - 1])).collect();
        for r in 1..m {
            rhs[r] -= self.sub[r] * rhs[r - 1];
        }
        let mut inner = vec![0.0; m];
        inner[m - 1] = rhs[m - 1] / self.diag[m - 1];
        for r in (0..m - 1).rev() {
            inner[r] = (rhs[r] - self.sup[r] * inner[r + 1]) / self.diag[r];
        }
        let mut out = Vec::with_capacity(n);
        let (h0, h1) = (h[0], h[1]);
        out.push(((h0 + h1) * inner[0] - h0 * inner[1]) / h1);
        out.extend_from_slice(&inner);
        let (a, b) = (h[n - 3], h[n - 2]);
        out.push(((a + b) * inner[m - 1] - b * inner[m - 2]) / a);
        Ok(out)
    }

    /// Evaluate the spline with ordinates `y` and moments `moments` at sorted
    /// query points inside `[x_0, x_{n-1}]`.
    pub fn eval_sorted(&self, y: &[f64], moments: &[f64], queries: &[f64]) -> Vec<f64> {
        let mut seg = 0;
        let last = self.x.len() - 2;
        queries
            .iter()
            .map(|&t| {
                while seg < last && t > self.x[seg + 1] {
                    seg += 1;
                }
                self.eval_segment(y, moments, seg, t)
            })
            .collect()
    }

    fn eval_segment(&self, y: &[f64], mo: &[f64], i: usize, t: f64) -> f64 {
        let h = self.h[i];
        let a = self.x[i + 1] - t;
        let b = t - self.x[i];
        mo[i] * a * a * a / (6.0 * h)
            + mo[i + 1] * b * b * b / (6.0 * h)
            + (y[i] / h - mo[i] * h / 6.0) * a
            + (y[i + 1] / h - mo[i + 1] * h / 6.0) * b
    }
}

/// Interpolate `(x, y)` at sorted query points with a not-a-knot spline.
pub fn interpolate(x: &[f64], y: &[f64], queries: &[f64]) -> Result<Vec<f64>, SplineError> {
    let basis = SplineBasis::new(x)?;
    let mo = basis.moments(y)?;
    Ok(basis.eval_sorted(y, &mo, queries))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_points_give_the_interpolating_cubic() {
        let f = |t: f64| 2.0 * t * t * t - t + 1.0;
        let x = [0.0, 0.3, 1.1, 2.0];
        let y: Vec<f64> = x.iter().map(|&t| f(t)).collect();
        let q: Vec<f64> = (0..=40).map(|k| k as f64 * 0.05).collect();
        for (t, v) in q.iter().zip(interpolate(&x, &y, &q).unwrap()) {
            assert!((v - f(*t)).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn moments_of_cubic_are_its_second_derivative() {
        let x = [0.0, 0.5, 0.7, 1.6, 2.0, 3.3];
        let y: Vec<f64> = x.iter().map(|&t| t * t * t).collect();
        let mo = SplineBasis::new(&x).unwrap().moments(&y).unwrap();
        for (t, m) in x.iter().zip(mo) {
            assert!((m - 6.0 * t).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_bad_knots() {
        assert_eq!(SplineBasis::new(&[0.0, 1.0, 2.0]).unwrap_err(), SplineError::TooFewSamples(3));
        assert_eq!(SplineBasis::new(&[0.0, 1.0, 1.0, 2.0]).unwrap_err(), SplineError::NonMonotonic(2));
    }

    #[test]
    fn passes_through_knots() {
        let x: Vec<f64> = (0..20).map(|i| (i as f64).powf(1.3)).collect();
        let y: Vec<f64> = x.iter().map(|t| (t * 0.7).sin()).collect();
        let v = interpolate(&x, &y, &x).unwrap();
        for (a, b) in v.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
