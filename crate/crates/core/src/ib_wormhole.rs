//! In-band wormhole: collapse-safe relay selection, the tunnel-length curve
//! beta(x), compromise dynamics and the resulting link delay.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::link_models::{DelayLaw, ValidLinkLaw};
use crate::rng;
use crate::topology::HopGraph;

/// A relay W3 keeps the tunnel W1 -> W3 -> W2 from collapsing iff
/// `d(W1, W3) < d(W2, W3) + 3`.
pub fn collapse_safe(d13: u32, d23: u32) -> bool {
    d13 < d23 + 3
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaPoint {
    pub x: f64,
    pub mean: f64,
    pub std_err: f64,
}

/// Monte-Carlo samples of the shortest collapse-safe tunnel length on a grid
/// of compromise fractions, with a convex nonincreasing fit.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaCurve {
    pub xs: Vec<f64>,
    pub means: Vec<f64>,
    pub std_errs: Vec<f64>,
    pub trials: usize,
    pub fallback: f64,
    fit: Vec<f64>,
    samples: Vec<Vec<f64>>,
}

impl BetaCurve {
    /// Curve from precomputed point estimates.
    pub fn from_points(xs: Vec<f64>, means: Vec<f64>, std_errs: Vec<f64>, fallback: f64) -> Result<Self> {
        if xs.len() < 2 || xs.len() != means.len() || xs.len() != std_errs.len() {
            return Err(Error::input("beta curve needs at least two points of matching length"));
        }
        if xs.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::input("beta curve abscissae must be strictly increasing"));
        }
        let fit = convexify(&xs, &means);
        Ok(BetaCurve { xs, means, std_errs, trials: 0, fallback, fit, samples: Vec::new() })
    }

    pub fn fit(&self) -> &[f64] {
        &self.fit
    }

    pub fn range(&self) -> (f64, f64) {
        (self.xs[0], *self.xs.last().unwrap())
    }

    /// Per-trial values (trial-major) when the curve came from sampling.
    pub fn samples(&self) -> &[Vec<f64>] {
        &self.samples
    }

    pub fn point(&self, k: usize) -> BetaPoint {
        BetaPoint { x: self.xs[k], mean: self.means[k], std_err: self.std_errs[k] }
    }

    /// Value of the convexified piecewise-linear fit.
    pub fn value(&self, x: f64) -> Result<f64> {
        let (lo, hi) = self.range();
        if !(x >= lo - 1e-12 && x <= hi + 1e-12) {
            return Err(Error::input(format!("x = {x} outside the sampled range [{lo}, {hi}]")));
        }
        let x = x.clamp(lo, hi);
        let k = match self.xs.iter().position(|&p| p >= x) {
            Some(0) | None => return Ok(if x <= lo { self.fit[0] } else { *self.fit.last().unwrap() }),
            Some(k) => k,
        };
        let (x0, x1) = (self.xs[k - 1], self.xs[k]);
        let w = (x - x0) / (x1 - x0);
        Ok(self.fit[k - 1] * (1.0 - w) + self.fit[k] * w)
    }

    /// Standard error of the paired second difference at interior point `k`.
    pub fn second_difference(&self, k: usize) -> Option<(f64, f64)> {
        if k == 0 || k + 1 >= self.xs.len() {
            return None;
        }
        let d = self.means[k - 1] - 2.0 * self.means[k] + self.means[k + 1];
        if self.samples.len() < 2 {
            return Some((d, 0.0));
        }
        let per: Vec<f64> = self
            .samples
            .iter()
            .map(|s| s[k - 1] - 2.0 * s[k] + s[k + 1])
            .collect();
        Some((d, std_err(&per)))
    }

    /// Paired difference `beta(x_{k+1}) - beta(x_k)` and its standard error.
    pub fn first_difference(&self, k: usize) -> Option<(f64, f64)> {
        if k + 1 >= self.xs.len() {
            return None;
        }
        let d = self.means[k + 1] - self.means[k];
        if self.samples.len() < 2 {
            return Some((d, 0.0));
        }
        let per: Vec<f64> = self.samples.iter().map(|s| s[k + 1] - s[k]).collect();
        Some((d, std_err(&per)))
    }
}

fn std_err(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (var / n).sqrt()
}

/// Convex, nonincreasing piecewise-linear fit through the sample means:
/// pool adjacent segment slopes until nondecreasing, cap them at zero, then
/// re-center on the data.
pub fn convexify(xs: &[f64], ys: &[f64]) -> Vec<f64> {
    let n = xs.len();
    if n < 2 {
        return ys.to_vec();
    }
    // Blocks of (weighted slope sum, weight, segment count).
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(n - 1);
    for k in 0..n - 1 {
        let w = xs[k + 1] - xs[k];
        let s = (ys[k + 1] - ys[k]) / w;
        blocks.push((s * w, w, 1));
        while blocks.len() > 1 {
            let (a, b) = (blocks[blocks.len() - 2], blocks[blocks.len() - 1]);
            if a.0 / a.1 <= b.0 / b.1 {
                break;
            }
            blocks.pop();
            let last = blocks.last_mut().unwrap();
            *last = (a.0 + b.0, a.1 + b.1, a.2 + b.2);
        }
    }
    let slopes: Vec<f64> = blocks
        .iter()
        .flat_map(|&(sum, w, count)| std::iter::repeat((sum / w).min(0.0)).take(count))
        .collect();

    let mut fit = Vec::with_capacity(n);
    fit.push(0.0);
    for k in 0..n - 1 {
        fit.push(fit[k] + slopes[k] * (xs[k + 1] - xs[k]));
    }
    let shift = ys.iter().zip(&fit).map(|(y, f)| y - f).sum::<f64>() / n as f64;
    fit.iter_mut().for_each(|f| *f += shift);
    fit
}

/// Estimates beta at every point of the increasing grid `xs`.
///
/// Trial `t` draws one permutation of all nodes from stream `(seed, t)`; the
/// compromised set at `x` is its first `floor(n x)` entries, so the sets are
/// nested across the grid and the estimates share their randomness. Trials
/// with no collapse-safe relay score `fallback` (default `n`).
pub fn beta_curve(
    graph: &HopGraph,
    entry: &str,
    exit: &str,
    xs: &[f64],
    trials: usize,
    seed: u64,
    fallback: Option<f64>,
) -> Result<BetaCurve> {
    let n = graph.node_count();
    let w1 = graph.node_index(entry)?;
    let w2 = graph.node_index(exit)?;
    if trials < 2 {
        return Err(Error::input("beta estimation needs at least two trials"));
    }
    if xs.is_empty() || xs.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::input("compromise grid must be nonempty and strictly increasing"));
    }
    let sizes: Vec<usize> = xs
        .iter()
        .map(|&x| {
            if !(x > 0.0 && x <= 1.0) {
                return Err(Error::input(format!("compromise fraction {x} outside (0, 1]")));
            }
            let m = (n as f64 * x + 1e-9).floor() as usize;
            if m == 0 {
                return Err(Error::input(format!("floor(n x) is zero at x = {x} with n = {n}")));
            }
            Ok(m.min(n))
        })
        .collect::<Result<_>>()?;
    let fallback = fallback.unwrap_or(n as f64);

    let d1 = graph.distances_from(w1);
    let d2 = graph.distances_from(w2);
    let score: Vec<Option<f64>> = (0..n)
        .map(|w| {
            if w == w1 || w == w2 {
                return None;
            }
            match (d1[w], d2[w]) {
                (Some(a), Some(b)) if collapse_safe(a, b) => Some(f64::from(a + b)),
                _ => None,
            }
        })
        .collect();

    let samples: Vec<Vec<f64>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng::stream(seed, rng::BETA_BASE + t as u64));
            let mut out = Vec::with_capacity(sizes.len());
            let mut best = f64::INFINITY;
            let mut taken = 0;
            for &m in &sizes {
                while taken < m {
                    if let Some(s) = score[order[taken]] {
                        best = best.min(s);
                    }
                    taken += 1;
                }
                out.push(if best.is_finite() { best } else { fallback });
            }
            out
        })
        .collect();

    let mut means = Vec::with_capacity(xs.len());
    let mut errs = Vec::with_capacity(xs.len());
    for k in 0..xs.len() {
        let col: Vec<f64> = samples.iter().map(|s| s[k]).collect();
        means.push(col.iter().sum::<f64>() / trials as f64);
        errs.push(std_err(&col));
    }
    let fit = if xs.len() >= 2 { convexify(xs, &means) } else { means.clone() };
    Ok(BetaCurve { xs: xs.to_vec(), means, std_errs: errs, trials, fallback, fit, samples })
}

/// Single-point estimate of beta at `x`.
pub fn beta_estimate(
    graph: &HopGraph,
    entry: &str,
    exit: &str,
    x: f64,
    trials: usize,
    seed: u64,
    fallback: Option<f64>,
) -> Result<BetaPoint> {
    let curve = beta_curve(graph, entry, exit, &[x], trials, seed, fallback)?;
    Ok(curve.point(0))
}

/// Central difference of the fitted curve, shortened at the grid ends.
pub fn beta_derivative(curve: &BetaCurve, x: f64) -> Result<f64> {
    let (lo, hi) = curve.range();
    if !(x >= lo && x <= hi) {
        return Err(Error::numerical(format!(
            "slope requested at x = {x}, outside the sampled range [{lo}, {hi}]"
        )));
    }
    let h = curve
        .xs
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min)
        * 1e-3;
    let (a, b) = ((x - h).max(lo), (x + h).min(hi));
    Ok((curve.value(b)? - curve.value(a)?) / (b - a))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompromiseState {
    pub x: f64,
    pub cost: f64,
    pub entry: String,
    pub exit: String,
}

/// `x <- clamp(x + dt (-beta' - c_A)_+, 0, 1)`.
pub fn compromise_step(state: &CompromiseState, beta_slope: f64, dt: f64) -> Result<CompromiseState> {
    if !(dt > 0.0) {
        return Err(Error::input("dt must be positive"));
    }
    let drive = (-beta_slope - state.cost).max(0.0);
    Ok(CompromiseState { x: (state.x + dt * drive).clamp(0.0, 1.0), ..state.clone() })
}

/// Runs the compromise dynamics on a fixed curve until the drive vanishes.
pub fn compromise_limit(curve: &BetaCurve, cost: f64, x0: f64, dt: f64, max_steps: usize) -> Result<f64> {
    let mut state = CompromiseState { x: x0, cost, entry: String::new(), exit: String::new() };
    for _ in 0..max_steps {
        let next = compromise_step(&state, beta_derivative(curve, state.x.min(curve.range().1))?, dt)?;
        if next.x == state.x {
            return Ok(state.x);
        }
        state = next;
    }
    Ok(state.x)
}

/// Delay of the advertised one-hop link when the tunnel really spans
/// `beta(x)` hops of the base law.
pub fn ib_delay(r: f64, x: f64, curve: &BetaCurve, base: &ValidLinkLaw) -> Result<f64> {
    if !(r >= 0.0) {
        return Err(Error::input(format!("link rate must be nonnegative, got {r}")));
    }
    Ok(curve.value(x)? * base.delay(r))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: usize) -> HopGraph {
        let edges: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
        HopGraph::from_edges(n, &edges)
    }

    #[test]
    fn collapse_rule() {
        assert!(collapse_safe(3, 1));
        assert!(!collapse_safe(5, 1));
        for d23 in 0..10 {
            assert!(collapse_safe(0, d23));
        }
    }

    #[test]
    fn full_compromise_matches_enumeration_on_a_line() {
        // W1 = 1, W2 = 4 on a 6-node line; every other node is a candidate.
        let g = line(6);
        let p = beta_estimate(&g, "1", "4", 1.0, 50, 3, None).unwrap();
        let mut best = f64::INFINITY;
        for w in [0usize, 2, 3, 5] {
            let d13 = (w as i64 - 1).unsigned_abs() as u32;
            let d23 = (w as i64 - 4).unsigned_abs() as u32;
            if collapse_safe(d13, d23) {
                best = best.min(f64::from(d13 + d23));
            }
        }
        assert_eq!(p.mean, best);
        assert_eq!(p.mean, 3.0);
        assert_eq!(p.std_err, 0.0);
    }

    #[test]
    fn tiny_fraction_falls_back() {
        let g = line(3);
        assert!(beta_estimate(&g, "0", "2", 0.2, 10, 1, None).is_err());
        let star = HopGraph::from_edges(4, &[(0, 1), (1, 2)]);
        let p = beta_estimate(&star, "0", "2", 0.25, 200, 1, Some(99.0)).unwrap();
        // One captured node out of four; only node 1 is a usable relay.
        assert!(p.mean > 2.0 && p.mean < 99.0);
    }

    #[test]
    fn estimates_are_reproducible() {
        let g = line(8);
        let a = beta_curve(&g, "2", "5", &[0.25, 0.5, 1.0], 300, 9, None).unwrap();
        let b = beta_curve(&g, "2", "5", &[0.25, 0.5, 1.0], 300, 9, None).unwrap();
        assert_eq!(a, b);
        assert!(a.means.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn derivative_examples() {
        let flat = BetaCurve::from_points(vec![0.2, 0.6], vec![4.0, 4.0], vec![0.0; 2], 20.0).unwrap();
        assert_eq!(beta_derivative(&flat, 0.4).unwrap(), 0.0);
        let two = BetaCurve::from_points(vec![0.2, 0.4], vec![10.0, 6.0], vec![0.0; 2], 20.0).unwrap();
        assert!((beta_derivative(&two, 0.3).unwrap() + 20.0).abs() < 1e-9);
        assert!(beta_derivative(&two, 0.5).is_err());
    }

    #[test]
    fn convexified_slopes_nondecreasing() {
        let xs = [0.1, 0.2, 0.4, 0.5, 0.7, 1.0];
        let ys = [9.0, 5.0, 5.5, 3.0, 3.2, 2.0];
        let fit = convexify(&xs, &ys);
        let slopes: Vec<f64> = (0..xs.len() - 1).map(|k| (fit[k + 1] - fit[k]) / (xs[k + 1] - xs[k])).collect();
        assert!(slopes.windows(2).all(|w| w[0] <= w[1] + 1e-12));
        assert!(slopes.iter().all(|&s| s <= 0.0));
    }

    #[test]
    fn compromise_step_examples() {
        let s = CompromiseState { x: 0.5, cost: 2.0, entry: "a".into(), exit: "b".into() };
        assert!((compromise_step(&s, -5.0, 1.0).unwrap().x - 1.0).abs() < 1e-15);
        assert!((compromise_step(&s, -5.0, 0.1).unwrap().x - 0.8).abs() < 1e-12);
        assert_eq!(compromise_step(&s, -1.0, 0.1).unwrap().x, 0.5);
        let top = CompromiseState { x: 1.0, ..s };
        assert_eq!(compromise_step(&top, -9.0, 0.1).unwrap().x, 1.0);
    }

    #[test]
    fn ib_delay_examples() {
        let base = ValidLinkLaw { capacity: 15.0, propagation_delay: 1.0, queue_capacity: 5 };
        let one = BetaCurve::from_points(vec![0.1, 1.0], vec![1.0, 1.0], vec![0.0; 2], 20.0).unwrap();
        assert_eq!(ib_delay(4.0, 0.5, &one, &base).unwrap(), base.delay(4.0));
        let two = BetaCurve::from_points(vec![0.1, 1.0], vec![2.0, 2.0], vec![0.0; 2], 20.0).unwrap();
        assert!(ib_delay(4.0, 0.5, &two, &base).unwrap() > base.delay(4.0));
    }
}
