//! Central finite-difference oracle for gradient verification.
//!
//! Lives outside the graph so the check stays independent of the backward
//! implementation it validates: only forward evaluations are used.

/// Central differences (f(x+h) - f(x-h)) / 2h per coordinate.
pub fn central_difference(f: &mut impl FnMut(&[f64]) -> f64, at: &[f64], step: f64) -> Vec<f64> {
    let mut probe = at.to_vec();
    let mut out = Vec::with_capacity(at.len());
    for i in 0..at.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = f(&probe);
        probe[i] = orig - step;
        let minus = f(&probe);
        probe[i] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    out
}

/// Relative error with an absolute guard for near-zero gradients.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| relative_error(*x, *y))
        .fold(0.0, f64::max)
}
