//! Central finite-difference gradient oracle.
//!
//! Used by the unit tests and by `check --suite grads`. The oracle only ever
//! evaluates the forward pass, so it stays independent of the backward code
//! it verifies.

/// Central differences of a scalar function at `x0`: (f(x+h) - f(x-h)) / 2h
/// per coordinate.
pub fn central_diff<F>(mut f: F, x0: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x0.len()];
    let mut probe = x0.to_vec();
    for i in 0..x0.len() {
        probe[i] = x0[i] + h;
        let plus = f(&probe);
        probe[i] = x0[i] - h;
        let minus = f(&probe);
        probe[i] = x0[i];
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Elementwise relative error, floored so both-tiny entries compare as equal.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}
