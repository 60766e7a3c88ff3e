use super::{NnError, Tensor};

/// Mean Huber loss and its gradient with respect to `pred`.
pub fn huber_loss(pred: &Tensor, target: &Tensor, delta: f64) -> Result<(f64, Tensor), NnError> {
    if pred.shape() != target.shape() {
        return Err(NnError::ShapeMismatch {
            op: "huber",
            expected: pred.shape().to_vec(),
            got: target.shape().to_vec(),
        });
    }
    if !(delta > 0.0) {
        return Err(NnError::NonPositive("huber delta"));
    }
    let (loss, grad) = huber_slices(pred.data(), target.data(), delta);
    Ok((loss, Tensor::new(pred.shape().to_vec(), grad)?))
}

pub(crate) fn huber_slices(pred: &[f64], target: &[f64], delta: f64) -> (f64, Vec<f64>) {
    let n = pred.len().max(1) as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let r = p - t;
            if r.abs() <= delta {
                loss += 0.5 * r * r;
                r / n
            } else {
                loss += delta * (r.abs() - 0.5 * delta);
                delta * r.signum() / n
            }
        })
        .collect();
    (loss / n, grad)
}
