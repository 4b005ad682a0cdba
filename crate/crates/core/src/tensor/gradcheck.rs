//! Central finite-difference utilities for verifying analytic gradients.
//!
//! The probes evaluate the forward pass only, so they stay independent of
//! the backward rules they are checking. Run in `f64`.

/// Relative error with a small floor so near-zero gradients compare sanely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Central difference of `f` along coordinate `i`, with the step scaled by
/// the coordinate's magnitude.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &mut [f64], i: usize, h: f64) -> f64 {
    let orig = x[i];
    let step = h * orig.abs().max(1.0);
    x[i] = orig + step;
    let fp = f(x);
    x[i] = orig - step;
    let fm = f(x);
    x[i] = orig;
    (fp - fm) / (2.0 * step)
}

/// Checks `analytic` against central differences of `f` at the listed
/// coordinates; returns the maximum relative error observed.
pub fn max_rel_err_at(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &mut [f64],
    analytic: &[f64],
    coords: &[usize],
    h: f64,
) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut worst = 0.0f64;
    for &i in coords {
        let numeric = central_diff(f, x, i, h);
        let e = rel_err(analytic[i], numeric);
        if e > worst {
            worst = e;
        }
    }
    worst
}

/// Evenly spread probe coordinates (at most `n` of them).
pub fn probe_coords(len: usize, n: usize) -> Vec<usize> {
    if len <= n {
        return (0..len).collect();
    }
    (0..n).map(|i| i * len / n).collect()
}
