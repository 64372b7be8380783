//! Finite-difference gradient checking shared by the unit tests.

use ndarray::Array2;

/// Central-difference numeric gradient of a scalar function.
pub(crate) fn numeric_grad(
    f: &mut dyn FnMut(&Array2<f64>) -> f64,
    x: &Array2<f64>,
    h: f64,
) -> Array2<f64> {
    let mut grad = Array2::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let original = probe[[r, c]];
        probe[[r, c]] = original + h;
        let plus = f(&probe);
        probe[[r, c]] = original - h;
        let minus = f(&probe);
        probe[[r, c]] = original;
        grad[[r, c]] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Relative-error comparison with a small absolute floor.
pub(crate) fn assert_grads_close(analytic: &Array2<f64>, numeric: &Array2<f64>, tol: f64) {
    assert_eq!(analytic.dim(), numeric.dim());
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        let err = (a - n).abs();
        let scale = a.abs().max(n.abs());
        assert!(
            err < tol * scale.max(1e-2),
            "gradient mismatch: analytic {a}, numeric {n} (rel tol {tol})"
        );
    }
}
