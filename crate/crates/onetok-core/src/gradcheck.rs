//! Central finite-difference gradient checking.
//!
//! Every hand-written backward in this crate is validated against this
//! harness in `f64`, where an `h = 1e-4` central difference resolves the
//! analytic gradient to well below the 1e-4 relative tolerance the tests use.

/// Central finite-difference gradient of a scalar function at `point`.
pub fn finite_difference<F>(f: F, point: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grads = Vec::with_capacity(point.len());
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        probe[i] = point[i] + h;
        let plus = f(&probe);
        probe[i] = point[i] - h;
        let minus = f(&probe);
        probe[i] = point[i];
        grads.push((plus - minus) / (2.0 * h));
    }
    grads
}

/// Relative error between an analytic gradient and a reference, using an
/// absolute floor so near-zero components do not blow up the ratio.
pub fn max_relative_error(analytic: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(analytic.len(), reference.len());
    let mut worst = 0.0f64;
    for (&a, &r) in analytic.iter().zip(reference.iter()) {
        let scale = a.abs().max(r.abs()).max(1e-6);
        let err = (a - r).abs() / scale;
        if err > worst {
            worst = err;
        }
    }
    worst
}

/// Assert that `analytic` matches the central finite difference of `f` at
/// `point` within `tol` relative error.
pub fn assert_grad_matches<F>(f: F, point: &[f64], analytic: &[f64], h: f64, tol: f64, what: &str)
where
    F: Fn(&[f64]) -> f64,
{
    let numeric = finite_difference(&f, point, h);
    let err = max_relative_error(analytic, &numeric);
    assert!(
        err < tol,
        "{what}: gradient mismatch, max relative error {err:.3e} (tol {tol:.1e})\n analytic: {analytic:?}\n numeric:  {numeric:?}"
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let f = |v: &[f64]| v[0] * v[0] + 3.0 * v[1];
        let g = finite_difference(f, &[2.0, -1.0], 1e-4);
        assert!((g[0] - 4.0).abs() < 1e-6);
        assert!((g[1] - 3.0).abs() < 1e-6);
    }
}
