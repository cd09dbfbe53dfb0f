//! Central finite differences, used as the independent gradient oracle.
//!
//! The checker only evaluates the forward path; it never touches the tape,
//! so it validates the reverse-mode rules rather than repeating them.

/// Central-difference gradient of a scalar function of a flat vector.
pub fn central_diff_gradient<F>(mut f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let hi = f(&probe);
        probe[i] = x[i] - step;
        let lo = f(&probe);
        probe[i] = x[i];
        grad[i] = (hi - lo) / (2.0 * step);
    }
    grad
}

/// Mixed relative/absolute comparison: |a-b| <= tol * max(1, |a|, |b|)
/// elementwise. Returns the worst offender on failure.
pub fn max_mismatch(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| (a - b).abs() / 1f64.max(a.abs()).max(b.abs()))
        .fold(0.0, f64::max)
}

/// Assert-style helper for tests.
pub fn check_gradients(analytic: &[f64], numeric: &[f64], tol: f64) -> Result<(), String> {
    let worst = max_mismatch(analytic, numeric);
    if worst <= tol {
        Ok(())
    } else {
        Err(format!(
            "gradient mismatch {worst:.3e} exceeds tolerance {tol:.1e}"
        ))
    }
}
