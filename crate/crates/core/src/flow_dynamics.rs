//! Source flow-allocation dynamics, Wardrop checks and the convex-program
//! equilibrium oracle.

use crate::error::{Error, Result};
use crate::link_models::SharedLaw;
use crate::quad;
use crate::topology::{IncidenceMatrix, NetworkSpec};

/// Relative slack allowed on `sum_P r_P = r_i`.
pub const FEASIBILITY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub t: f64,
    /// `rates[i][j]`: rate of source `i` on its `j`-th path.
    pub rates: Vec<Vec<f64>>,
    pub totals: Vec<f64>,
}

impl FlowState {
    /// Checks the allocation against the spec's source rates.
    pub fn new(spec: &NetworkSpec, rates: Vec<Vec<f64>>) -> Result<Self> {
        if rates.len() != spec.sources().len() {
            return Err(Error::input("one allocation per source is required"));
        }
        let mut totals = Vec::with_capacity(rates.len());
        for (src, alloc) in spec.sources().iter().zip(&rates) {
            if alloc.len() != src.paths.len() {
                return Err(Error::input(format!(
                    "source {} has {} paths but {} allocations",
                    src.id,
                    src.paths.len(),
                    alloc.len()
                )));
            }
            if alloc.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
                return Err(Error::input(format!("source {}: negative or non-finite allocation", src.id)));
            }
            let sum: f64 = alloc.iter().sum();
            if (sum - src.rate).abs() > 1e-9 * src.rate.max(1.0) {
                return Err(Error::input(format!(
                    "source {}: allocation sums to {sum}, rate is {}",
                    src.id, src.rate
                )));
            }
            totals.push(src.rate);
        }
        Ok(FlowState { t: 0.0, rates, totals })
    }

    /// Even split over every path.
    pub fn uniform(spec: &NetworkSpec) -> Self {
        let rates = spec
            .sources()
            .iter()
            .map(|s| vec![s.rate / s.paths.len() as f64; s.paths.len()])
            .collect();
        FlowState { t: 0.0, rates, totals: spec.sources().iter().map(|s| s.rate).collect() }
    }

    pub fn stacked(&self) -> Vec<f64> {
        self.rates.iter().flatten().copied().collect()
    }

    pub fn is_feasible(&self) -> bool {
        self.rates.iter().zip(&self.totals).all(|(alloc, &total)| {
            alloc.iter().all(|r| *r >= 0.0)
                && (alloc.iter().sum::<f64>() - total).abs() <= FEASIBILITY_TOL * total.max(1.0) * alloc.len() as f64
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathDelays {
    pub per_source: Vec<Vec<f64>>,
    pub min_index: Vec<usize>,
}

impl PathDelays {
    pub fn from_per_source(per_source: Vec<Vec<f64>>) -> Self {
        let min_index = per_source.iter().map(|q| min_delay_path(q)).collect();
        PathDelays { per_source, min_index }
    }

    /// Splits a stacked path vector by source.
    pub fn from_stacked(spec: &NetworkSpec, q: &[f64]) -> Self {
        let per_source = (0..spec.sources().len())
            .map(|i| q[spec.path_range(i)].to_vec())
            .collect();
        Self::from_per_source(per_source)
    }

    pub fn stacked(&self) -> Vec<f64> {
        self.per_source.iter().flatten().copied().collect()
    }
}

/// `q_P = sum of the link outputs along P`.
pub fn path_delays(spec: &NetworkSpec, a: &IncidenceMatrix, link_delays: &[f64]) -> Result<PathDelays> {
    if link_delays.len() != a.rows() {
        return Err(Error::input("one delay per link is required"));
    }
    if let Some(l) = link_delays.iter().position(|d| !(*d >= 0.0 && d.is_finite())) {
        return Err(Error::input(format!(
            "link {} has invalid delay {}",
            spec.links()[l].id,
            link_delays[l]
        )));
    }
    let q: Vec<f64> = (0..a.cols())
        .map(|p| (0..a.rows()).filter(|&l| a.get(l, p) == 1).map(|l| link_delays[l]).sum())
        .collect();
    Ok(PathDelays::from_stacked(spec, &q))
}

/// Index of the smallest delay; ties go to the lowest index.
pub fn min_delay_path(q: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in q.iter().enumerate().skip(1) {
        if *v < q[best] {
            best = j;
        }
    }
    best
}

/// One explicit Euler step of the projected flow-shifting dynamics.
///
/// Every non-minimal path sheds `dt * (q_P - q_min)`, but never more than it
/// carries; the minimal path receives exactly what the others shed. Mass is
/// conserved by construction and rates stay nonnegative.
pub fn wardrop_step(state: &FlowState, q: &PathDelays, dt: f64) -> Result<FlowState> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::input(format!("dt must be positive, got {dt}")));
    }
    if q.per_source.len() != state.rates.len() {
        return Err(Error::input("delay and rate vectors disagree in source count"));
    }
    let mut rates = Vec::with_capacity(state.rates.len());
    for ((alloc, delays), (&m, &total)) in state
        .rates
        .iter()
        .zip(&q.per_source)
        .zip(q.min_index.iter().zip(&state.totals))
    {
        if alloc.len() != delays.len() {
            return Err(Error::input("delay and rate vectors disagree in path count"));
        }
        let qmin = delays[m];
        let mut next = alloc.clone();
        let mut others = 0.0;
        for j in 0..alloc.len() {
            if j == m {
                continue;
            }
            let shed = (dt * (delays[j] - qmin)).max(0.0).min(alloc[j]);
            next[j] = alloc[j] - shed;
            others += next[j];
        }
        next[m] = (total - others).max(0.0);
        rates.push(next);
    }
    Ok(FlowState { t: state.t + dt, rates, totals: state.totals.clone() })
}

/// Continuous-time derivative of the dynamics at `state`.
pub fn flow_derivative(state: &FlowState, q: &PathDelays) -> Vec<Vec<f64>> {
    state
        .rates
        .iter()
        .zip(&q.per_source)
        .zip(&q.min_index)
        .map(|((alloc, delays), &m)| {
            let mut d: Vec<f64> = alloc
                .iter()
                .zip(delays)
                .map(|(&r, &qp)| {
                    let gap = qp - delays[m];
                    if gap > 0.0 && r <= 0.0 {
                        0.0
                    } else {
                        -gap
                    }
                })
                .collect();
            d[m] = 0.0;
            d[m] = -d.iter().sum::<f64>();
            d
        })
        .collect()
}

/// Every path carrying more than `tol` is within `tol` of its source's
/// minimum delay.
pub fn is_wardrop(state: &FlowState, q: &PathDelays, tol: f64) -> bool {
    state.rates.iter().zip(&q.per_source).all(|(alloc, delays)| {
        let qmin = delays.iter().copied().fold(f64::INFINITY, f64::min);
        alloc.iter().zip(delays).all(|(&r, &qp)| r <= tol || qp <= qmin + tol)
    })
}

/// Real-valued link-by-path load matrix. Equal to the incidence matrix
/// unless some path's traffic is physically carried elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadMap {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

impl LoadMap {
    pub fn from_incidence(a: &IncidenceMatrix) -> Self {
        let entries = (0..a.rows())
            .flat_map(|l| (0..a.cols()).map(move |p| (l, p)))
            .map(|(l, p)| f64::from(a.get(l, p)))
            .collect();
        LoadMap { rows: a.rows(), cols: a.cols(), entries }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, l: usize, p: usize) -> f64 {
        self.entries[l * self.cols + p]
    }

    pub fn set(&mut self, l: usize, p: usize, v: f64) {
        self.entries[l * self.cols + p] = v;
    }

    pub fn add(&mut self, l: usize, p: usize, v: f64) {
        self.entries[l * self.cols + p] += v;
    }

    pub fn loads(&self, r: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|l| (0..self.cols).map(|p| self.get(l, p) * r[p]).sum())
            .collect()
    }

    /// Transpose product: per-path sums of weighted link values.
    pub fn path_sums(&self, link_values: &[f64]) -> Vec<f64> {
        (0..self.cols)
            .map(|p| {
                (0..self.rows)
                    .filter(|&l| self.get(l, p) != 0.0)
                    .map(|l| self.get(l, p) * link_values[l])
                    .sum()
            })
            .collect()
    }

    fn norm_product(&self) -> f64 {
        let col = (0..self.cols)
            .map(|p| (0..self.rows).map(|l| self.get(l, p).abs()).sum::<f64>())
            .fold(0.0, f64::max);
        let row = (0..self.rows)
            .map(|l| (0..self.cols).map(|p| self.get(l, p).abs()).sum::<f64>())
            .fold(0.0, f64::max);
        col * row
    }
}

/// `sum_l integral_0^{z_l} f_l(s) ds` at loads `z`.
pub fn beckmann_potential(laws: &[SharedLaw], loads: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for (law, &z) in laws.iter().zip(loads) {
        if z > 0.0 {
            total += quad::integrate(|s| law.delay(s), 0.0, z, &law.breakpoints(), 1e-10)?;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy)]
pub struct OracleOptions {
    /// Stop once the flow-weighted Wardrop gap falls below `tol * sum r_i`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions { tol: 1e-10, max_iter: 400_000 }
    }
}

#[derive(Debug, Clone)]
pub struct OracleSolution {
    pub rates: Vec<Vec<f64>>,
    pub link_loads: Vec<f64>,
    pub path_delays: Vec<f64>,
    pub objective: f64,
    pub gap: f64,
    pub iterations: usize,
    /// Whether every loaded link law rose strictly on the check grid.
    pub strictly_increasing: bool,
}

/// Minimizes the Beckmann potential over the product of simplices by
/// projected gradient descent with a slowly diminishing step.
pub fn equilibrium_oracle(
    spec: &NetworkSpec,
    map: &LoadMap,
    laws: &[SharedLaw],
    opts: OracleOptions,
) -> Result<OracleSolution> {
    if laws.len() != map.rows() || map.cols() != spec.path_count() {
        return Err(Error::input("law count or load map shape does not match the network"));
    }
    let total_rate: f64 = spec.sources().iter().map(|s| s.rate).sum();
    let mut source_of = vec![0usize; spec.path_count()];
    for i in 0..spec.sources().len() {
        for p in spec.path_range(i) {
            source_of[p] = i;
        }
    }

    // Monotonicity and slope scan over each link's reachable load range.
    const GRID: usize = 2000;
    let mut strict = true;
    let mut slope_max: f64 = 0.0;
    for (l, law) in laws.iter().enumerate() {
        let reach: f64 = (0..map.cols())
            .map(|p| map.get(l, p).abs() * spec.sources()[source_of[p]].rate)
            .sum();
        if reach == 0.0 {
            continue;
        }
        let vals: Vec<f64> = (0..=GRID).map(|k| law.delay(reach * k as f64 / GRID as f64)).collect();
        if let Some(k) = vals.iter().position(|v| !v.is_finite()) {
            return Err(Error::numerical(format!(
                "law of link {} is unbounded at load {}",
                spec.links()[l].id,
                reach * k as f64 / GRID as f64
            )));
        }
        let identically_zero = vals.iter().all(|v| *v == 0.0);
        for (k, w) in vals.windows(2).enumerate() {
            if w[1] < w[0] - 1e-12 * w[0].abs().max(1.0) {
                return Err(Error::model(format!(
                    "delay law of link {} decreases near load {}",
                    spec.links()[l].id,
                    reach * k as f64 / GRID as f64
                )));
            }
            if !identically_zero && w[1] <= w[0] {
                strict = false;
            }
            slope_max = slope_max.max((w[1] - w[0]) * GRID as f64 / reach);
        }
    }
    let lipschitz = (slope_max * map.norm_product()).max(1e-9);
    let mut eta0 = 1.0 / lipschitz;
    let tau = (opts.max_iter / 10).max(1) as f64;

    let eval = |r: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let z = map.loads(r);
        let f: Vec<f64> = laws.iter().zip(&z).map(|(law, &zl)| law.delay(zl)).collect();
        (z, map.path_sums(&f))
    };
    let gap_of = |r: &[f64], g: &[f64]| -> f64 {
        (0..spec.sources().len())
            .map(|i| {
                let range = spec.path_range(i);
                let gmin = g[range.clone()].iter().copied().fold(f64::INFINITY, f64::min);
                range.map(|p| r[p] * (g[p] - gmin)).sum::<f64>()
            })
            .sum()
    };

    let mut r = FlowState::uniform(spec).stacked();
    let mut checkpoint = (r.clone(), beckmann_potential(laws, &map.loads(&r))?);
    let mut gap = f64::INFINITY;
    let mut k = 0;
    while k < opts.max_iter {
        let (_, g) = eval(&r);
        gap = gap_of(&r, &g);
        if gap <= opts.tol * total_rate {
            break;
        }
        let eta = eta0 / (1.0 + k as f64 / tau);
        for i in 0..spec.sources().len() {
            let range = spec.path_range(i);
            let y: Vec<f64> = range.clone().map(|p| r[p] - eta * g[p]).collect();
            let proj = project_simplex(&y, spec.sources()[i].rate);
            for (p, v) in range.zip(proj) {
                r[p] = v;
            }
        }
        k += 1;
        if k % 200 == 0 {
            let obj = beckmann_potential(laws, &map.loads(&r))?;
            if obj > checkpoint.1 + 1e-12 * checkpoint.1.abs().max(1.0) {
                eta0 *= 0.5;
                r = checkpoint.0.clone();
            } else {
                checkpoint = (r.clone(), obj);
            }
        }
    }
    if gap > opts.tol * total_rate {
        return Err(Error::numerical(format!(
            "equilibrium oracle stalled after {k} iterations (gap {gap:e})"
        )));
    }

    let (z, g) = eval(&r);
    let rates = (0..spec.sources().len()).map(|i| r[spec.path_range(i)].to_vec()).collect();
    Ok(OracleSolution {
        rates,
        objective: beckmann_potential(laws, &z)?,
        link_loads: z,
        path_delays: g,
        gap,
        iterations: k,
        strictly_increasing: strict,
    })
}

/// Euclidean projection onto `{x >= 0, sum x = total}`.
pub fn project_simplex(y: &[f64], total: f64) -> Vec<f64> {
    let mut u = y.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, &v) in u.iter().enumerate() {
        cum += v;
        let t = (cum - total) / (j + 1) as f64;
        if v - t > 0.0 {
            theta = t;
        }
    }
    y.iter().map(|v| (v - theta).max(0.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::link_models::{FnLaw, ValidLinkLaw};
    use crate::topology::{build_incidence, LinkId, LinkKind, LinkSpec, SourceSpec};
    use std::sync::Arc;

    fn parallel(n_paths: usize, rate: f64) -> NetworkSpec {
        let links = (0..n_paths)
            .map(|j| LinkSpec {
                id: LinkId(j as u32 + 1),
                from: "s".into(),
                to: "t".into(),
                kind: LinkKind::Valid,
                capacity: 2.0,
                propagation_delay: 1.0,
                queue_capacity: 5,
                slack: 0.0,
            })
            .collect();
        let src = SourceSpec {
            id: 1,
            origin: "s".into(),
            destination: "t".into(),
            rate,
            paths: (0..n_paths).map(|j| vec![LinkId(j as u32 + 1)]).collect(),
        };
        NetworkSpec::new(vec!["s".into(), "t".into()], links, vec![src], 1.0).unwrap()
    }

    fn state(rates: Vec<f64>) -> FlowState {
        let total = rates.iter().sum();
        FlowState { t: 0.0, rates: vec![rates], totals: vec![total] }
    }

    #[test]
    fn min_path_tie_break() {
        assert_eq!(min_delay_path(&[3.0, 1.0, 2.0]), 1);
        assert_eq!(min_delay_path(&[1.0, 1.0, 2.0]), 0);
        assert_eq!(min_delay_path(&[4.0]), 0);
    }

    #[test]
    fn path_delays_sum_links() {
        let spec = parallel(2, 1.0);
        let a = build_incidence(&spec);
        let q = path_delays(&spec, &a, &[1.5, 0.5]).unwrap();
        assert_eq!(q.per_source[0], vec![1.5, 0.5]);
        assert_eq!(q.min_index[0], 1);
        assert!(path_delays(&spec, &a, &[-1.0, 0.5]).is_err());
    }

    #[test]
    fn euler_step_examples() {
        let uniform = PathDelays::from_per_source(vec![vec![2.0, 2.0, 2.0]]);
        let s = state(vec![1.0, 2.0, 3.0]);
        assert_eq!(wardrop_step(&s, &uniform, 0.01).unwrap().rates, s.rates);

        let q = PathDelays::from_per_source(vec![vec![2.0, 1.0]]);
        let next = wardrop_step(&state(vec![1.0, 1.0]), &q, 0.1).unwrap();
        assert!((next.rates[0][0] - 0.9).abs() < 1e-15 && (next.rates[0][1] - 1.1).abs() < 1e-15);

        let pinned = wardrop_step(&state(vec![0.0, 2.0]), &q, 0.1).unwrap();
        assert_eq!(pinned.rates[0], vec![0.0, 2.0]);
        assert_eq!(flow_derivative(&state(vec![0.0, 2.0]), &q), vec![vec![0.0, 0.0]]);

        assert!(matches!(wardrop_step(&s, &uniform, 0.0), Err(Error::Input(_))));
    }

    #[test]
    fn wardrop_predicate_examples() {
        let equal = PathDelays::from_per_source(vec![vec![1.0, 1.0]]);
        assert!(is_wardrop(&state(vec![0.3, 0.7]), &equal, 1e-3));
        let q = PathDelays::from_per_source(vec![vec![2.0, 1.0]]);
        assert!(!is_wardrop(&state(vec![1.0, 0.0]), &q, 1e-3));
        assert!(is_wardrop(&state(vec![0.0, 1.0]), &q, 1e-3));
    }

    #[test]
    fn simplex_projection() {
        let p = project_simplex(&[0.5, 0.5, 5.0], 3.0);
        assert!((p.iter().sum::<f64>() - 3.0).abs() < 1e-12);
        assert_eq!(p, vec![0.0, 0.0, 3.0]);
        let q = project_simplex(&[1.0, 1.0], 4.0);
        assert_eq!(q, vec![2.0, 2.0]);
    }

    #[test]
    fn oracle_splits_identical_paths_evenly() {
        let spec = parallel(2, 3.0);
        let a = build_incidence(&spec);
        let law = ValidLinkLaw { capacity: 2.0, propagation_delay: 1.0, queue_capacity: 5 };
        let laws: Vec<SharedLaw> = vec![Arc::new(law), Arc::new(law)];
        let sol = equilibrium_oracle(&spec, &LoadMap::from_incidence(&a), &laws, OracleOptions::default())
            .unwrap();
        assert!((sol.rates[0][0] - 1.5).abs() < 1e-6);
        assert!(sol.strictly_increasing);
    }

    #[test]
    fn oracle_rejects_decreasing_law() {
        let spec = parallel(2, 3.0);
        let a = build_incidence(&spec);
        let laws: Vec<SharedLaw> = vec![Arc::new(FnLaw(|r: f64| 5.0 - r)), Arc::new(FnLaw(|r: f64| r))];
        let err = equilibrium_oracle(&spec, &LoadMap::from_incidence(&a), &laws, OracleOptions::default());
        assert!(matches!(err, Err(Error::Model(_))));
    }

    #[test]
    fn oracle_matches_closed_form_affine_split() {
        // f1 = 1 + r, f2 = 2 + 2r, total 4 => 1 + r1 = 2 + 2(4 - r1) => r1 = 3.
        let spec = parallel(2, 4.0);
        let a = build_incidence(&spec);
        let laws: Vec<SharedLaw> =
            vec![Arc::new(FnLaw(|r: f64| 1.0 + r)), Arc::new(FnLaw(|r: f64| 2.0 + 2.0 * r))];
        let sol = equilibrium_oracle(&spec, &LoadMap::from_incidence(&a), &laws, OracleOptions::default())
            .unwrap();
        assert!((sol.rates[0][0] - 3.0).abs() < 1e-6, "{:?}", sol.rates);
        assert!((sol.objective - (3.0 + 4.5 + 2.0 + 1.0)).abs() < 1e-5);
    }
}
