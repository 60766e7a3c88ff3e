use serde::{Deserialize, Serialize};

use super::{NnError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates for a fixed list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub cfg: AdamConfig,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, cfg: AdamConfig) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(Tensor::zeros_like).collect();
        Self { v: m.clone(), m, step: 0, cfg }
    }

    /// One bias-corrected update; no weight or learning-rate decay.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<(), NnError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NnError::ShapeMismatch {
                op: "adam parameter count",
                expected: vec![self.m.len()],
                got: vec![params.len(), grads.len()],
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != m.shape() || g.shape() != m.shape() {
                return Err(NnError::ShapeMismatch {
                    op: "adam",
                    expected: m.shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let t = self.step.min(i32::MAX as u64) as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
            for (((pi, &gi), mi), vi) in it {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *pi -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        let g = Tensor::zeros(&[2]);
        let mut st = AdamState::new([&p], AdamConfig::default());
        for _ in 0..3 {
            st.step(&mut [&mut p], &[&g]).unwrap();
        }
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert!(st.m[0].data().iter().chain(st.v[0].data()).all(|&x| x == 0.0));
    }

    #[test]
    fn first_step_by_hand() {
        let mut p = Tensor::vector(vec![0.5]);
        let g = Tensor::vector(vec![1.0]);
        let mut st = AdamState::new([&p], AdamConfig::default());
        st.step(&mut [&mut p], &[&g]).unwrap();
        // m = 0.1, v = 0.001; corrected both to 1: step = lr / (1 + eps).
        let m_hat: f64 = 0.1 / (1.0 - 0.9);
        let v_hat: f64 = 0.001 / (1.0 - 0.999);
        let expected = 0.5 - 1e-3 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-12);
        assert!((p.data()[0] - (0.5 - 1e-3 / (1.0 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn identical_runs_agree() {
        let run = || {
            let mut p = Tensor::vector(vec![0.3, 0.7]);
            let mut st = AdamState::new([&p], AdamConfig { lr: 0.05, ..Default::default() });
            for k in 0..50 {
                let g = Tensor::vector(p.data().iter().map(|x| 2.0 * x + 0.01 * k as f64).collect());
                st.step(&mut [&mut p], &[&g]).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Tensor::vector(vec![0.0]);
        let mut st = AdamState::new([&p], AdamConfig::default());
        let g = Tensor::zeros(&[2]);
        assert!(st.step(&mut [&mut p], &[&g]).is_err());
    }
}
