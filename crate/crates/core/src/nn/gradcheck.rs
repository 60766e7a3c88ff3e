/// Largest relative disagreement between `analytic` and central differences
/// of `f` at `x`, with relative error `|a - n| / max(1e-6, |a| + |n|)`.
/// The floor keeps partials below the round-off level of the difference
/// quotient from dominating the result.
pub fn grad_check(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64], eps: f64) -> f64 {
    assert_eq!(x.len(), analytic.len(), "one analytic partial per coordinate");
    let mut p = x.to_vec();
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let orig = p[i];
        p[i] = orig + eps;
        let up = f(&p);
        p[i] = orig - eps;
        let down = f(&p);
        p[i] = orig;
        let num = (up - down) / (2.0 * eps);
        let err = (a - num).abs() / (a.abs() + num.abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let e = grad_check(|v| v[0] * v[0], &[3.0], &[6.0], 1e-5);
        assert!(e < 1e-9, "{e}");
    }

    #[test]
    fn wrong_gradient_is_reported() {
        assert!(grad_check(|v| v[0] * v[0], &[3.0], &[5.0], 1e-5) > 0.05);
    }
}
