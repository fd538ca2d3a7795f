//! Central finite-difference gradient oracle.
//!
//! Rebuilds the forward computation at perturbed inputs, so the result is
//! independent of the tape's backward pass — perturb one coordinate, rerun,
//! difference. Used by the unit and acceptance suites to check every
//! differentiable op.

/// Central difference gradient of a scalar function of a flat vector.
pub fn central_diff<F>(f: F, xs: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grad = vec![0.0; xs.len()];
    let mut work = xs.to_vec();
    for i in 0..xs.len() {
        let orig = work[i];
        work[i] = orig + step;
        let plus = f(&work);
        work[i] = orig - step;
        let minus = f(&work);
        work[i] = orig;
        grad[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Max relative error between two gradient vectors, with a small floor so
/// near-zero pairs compare absolutely.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch: {} vs {}", a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}
