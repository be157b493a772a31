//! Adaptive quadrature with breakpoint splitting.

use crate::error::{Error, Result};

/// Integrates `f` over `[a, b]` (either orientation), splitting at any
/// breakpoints inside the interval so kinks sit on panel edges.
pub fn integrate<F>(f: F, a: f64, b: f64, breakpoints: &[f64], tol: f64) -> Result<f64>
where
    F: Fn(f64) -> f64,
{
    if !(a.is_finite() && b.is_finite()) {
        return Err(Error::numerical(format!("non-finite integration bounds [{a}, {b}]")));
    }
    if a == b {
        return Ok(0.0);
    }
    let (lo, hi, sign) = if a < b { (a, b, 1.0) } else { (b, a, -1.0) };

    let mut cuts = vec![lo];
    let mut inner: Vec<f64> = breakpoints
        .iter()
        .copied()
        .filter(|p| *p > lo && *p < hi)
        .collect();
    inner.sort_by(f64::total_cmp);
    inner.dedup();
    cuts.extend(inner);
    cuts.push(hi);

    let panel_tol = tol / (cuts.len() - 1) as f64;
    let mut total = 0.0;
    for w in cuts.windows(2) {
        let bad = std::cell::Cell::new(false);
        let out = quadrature::integrate(
            |s| {
                let v = f(s);
                if !v.is_finite() {
                    bad.set(true);
                }
                v
            },
            w[0],
            w[1],
            panel_tol,
        );
        if bad.get() {
            return Err(Error::numerical(format!(
                "integrand not finite on [{}, {}]",
                w[0], w[1]
            )));
        }
        if !(out.integral.is_finite() && out.error_estimate <= panel_tol.max(1e-13 * out.integral.abs())) {
            return Err(Error::numerical(format!(
                "quadrature did not converge on [{}, {}]: estimate {} error {}",
                w[0], w[1], out.integral, out.error_estimate
            )));
        }
        total += out.integral;
    }
    Ok(sign * total)
}
