//! Shared helpers for unit tests: central finite differences and relative
//! error comparison.

use ndarray::ArrayD;

/// Central finite-difference gradient of a scalar function.
pub fn numeric_grad(
    mut f: impl FnMut(&ArrayD<f64>) -> f64,
    x: &ArrayD<f64>,
    eps: f64,
) -> ArrayD<f64> {
    let mut g = ArrayD::zeros(x.raw_dim());
    let mut probe = x.clone();
    let n = x.len();
    for i in 0..n {
        let orig = probe.as_slice().unwrap()[i];
        probe.as_slice_mut().unwrap()[i] = orig + eps;
        let fp = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig - eps;
        let fm = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig;
        g.as_slice_mut().unwrap()[i] = (fp - fm) / (2.0 * eps);
    }
    g
}

/// Max elementwise relative error with an absolute floor.
pub fn max_rel_err(a: &ArrayD<f64>, b: &ArrayD<f64>, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
