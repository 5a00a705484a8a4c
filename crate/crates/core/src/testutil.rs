//! Shared oracles for unit tests. These stay independent of the tape's
//! backward path: finite differences re-run forward code only.

/// Central finite differences of a scalar function of a flat input vector,
/// step 1e-5 in double precision.
pub fn finite_diff<F: FnMut(&[f64]) -> f64>(x: &[f64], mut f: F) -> Vec<f64> {
    let h = 1e-5;
    let mut out = vec![0.0; x.len()];
    let mut xs = x.to_vec();
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let fp = f(&xs);
        xs[i] = orig - h;
        let fm = f(&xs);
        xs[i] = orig;
        out[i] = (fp - fm) / (2.0 * h);
    }
    out
}

pub fn assert_close_rel(analytic: &[f64], numeric: &[f64], tol: f64) {
    assert_eq!(analytic.len(), numeric.len());
    for (a, n) in analytic.iter().zip(numeric) {
        let denom = 1.0_f64.max(a.abs()).max(n.abs());
        assert!(
            (a - n).abs() / denom < tol,
            "grad mismatch: analytic {} vs numeric {}",
            a,
            n
        );
    }
}
