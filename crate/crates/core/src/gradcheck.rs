//! Central-difference gradient estimates used to validate analytic gradients.

use crate::error::{Error, Result};

/// `(f(x + h e_k) - f(x - h e_k)) / 2h` for every coordinate `k`.
pub fn finite_diff_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step {step}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        let orig = probe[k];
        probe[k] = orig + step;
        let fp = f(&probe);
        probe[k] = orig - step;
        let fm = f(&probe);
        probe[k] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("f(x ± h e_{k}) = ({fp}, {fm})")));
        }
        grad.push((fp - fm) / (2.0 * step));
    }
    Ok(grad)
}

/// Largest relative discrepancy `|a-b| / max(|a|, |b|, floor)` over all coordinates.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}
