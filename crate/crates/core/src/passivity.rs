//! Storage functions for the feedback blocks and a trajectory audit of the
//! dissipation inequalities they should satisfy.

use std::sync::Arc;

use crate::composition::{LinkModel, SimTrace, SystemAssembly};
use crate::error::{Error, Result};
use crate::flow_dynamics::{LoadMap, OracleOptions};
use crate::ib_wormhole::BetaCurve;
use crate::link_models::{DelayLaw, SharedLaw};
use crate::quad;

/// Storage values below this are counted as negative.
pub const VALUE_FLOOR: f64 = -1e-6;

const QUAD_TOL: f64 = 1e-12;

/// `q*^T (r - r*)` for the flow block.
pub fn v1_storage(q_star: &[f64], r: &[f64], r_star: &[f64]) -> Result<f64> {
    if q_star.len() != r.len() || r.len() != r_star.len() {
        return Err(Error::input("storage vectors differ in length"));
    }
    Ok(q_star.iter().zip(r).zip(r_star).map(|((q, a), b)| q * (a - b)).sum())
}

/// `integral_{z*}^{z} (g(s) - g(z*)) ds` for a static link law.
pub fn v2_storage(law: &dyn DelayLaw, z: f64, z_star: f64) -> Result<f64> {
    let g_star = law.delay(z_star);
    quad::integrate(|s| law.delay(s) - g_star, z_star, z, &law.breakpoints(), QUAD_TOL)
}

/// Same construction on the leash-added law.
pub fn v3_storage(added: &dyn DelayLaw, z: f64, z_star: f64) -> Result<f64> {
    v2_storage(added, z, z_star)
}

/// `beta(x) H(z) - beta* [H(z*) + f(z*) (z - z*)]`, with `H` the integral of
/// the advertised law `f`. Nonnegative whenever `x <= x*`.
pub fn vl_inband_storage(curve: &BetaCurve, base: &dyn DelayLaw, z: f64, x: f64, z_star: f64, x_star: f64) -> Result<f64> {
    let bps = base.breakpoints();
    let h = quad::integrate(|s| base.delay(s), 0.0, z, &bps, QUAD_TOL)?;
    let h_star = quad::integrate(|s| base.delay(s), 0.0, z_star, &bps, QUAD_TOL)?;
    let b_star = curve.value(x_star)?;
    Ok(curve.value(x)? * h - b_star * (h_star + base.delay(z_star) * (z - z_star)))
}

pub enum Block {
    /// Flow dynamics around the equilibrium `(r*, q*)`.
    Flow { q_star: Vec<f64>, r_star: Vec<f64> },
    /// A static law on one link's load.
    Link { name: String, position: usize, law: SharedLaw, z_star: f64 },
    /// Tunnel whose delay scales with `beta(x)`.
    InBand { name: String, position: usize, curve: Arc<BetaCurve>, base: SharedLaw, z_star: f64, x_star: f64 },
    /// Beckmann potential of the whole loop, which should never increase.
    Potential { laws: Vec<SharedLaw>, beta: Option<(usize, Arc<BetaCurve>)> },
}

impl Block {
    pub fn name(&self) -> String {
        match self {
            Block::Flow { .. } => "flow".to_string(),
            Block::Link { name, .. } | Block::InBand { name, .. } => name.clone(),
            Block::Potential { .. } => "composite".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StorageEval {
    pub block: String,
    pub values: Vec<f64>,
    /// Steps where `dV/dt` exceeded the supply rate by more than `tol`.
    pub violations: usize,
    /// Largest `dV/dt - supply` seen.
    pub max_excess: f64,
    pub min_value: f64,
    pub supply_total: f64,
    /// Whether the storage must stay nonnegative.
    pub nonnegative: bool,
}

impl StorageEval {
    pub fn passed(&self) -> bool {
        self.violations == 0 && (!self.nonnegative || self.min_value >= VALUE_FLOOR)
    }
}

/// Checks `V_{k+1} - V_k <= supply_k + tol * dt` along a recorded trajectory.
pub fn audit_trajectory(trace: &SimTrace, map: &LoadMap, block: &Block, tol: f64) -> Result<StorageEval> {
    let rows = &trace.rows;
    if rows.len() < 2 {
        return Err(Error::Audit("trajectory needs at least two rows".into()));
    }
    if rows[0].rates.len() != map.cols() {
        return Err(Error::Audit("trace does not match the network layout".into()));
    }
    let loads: Vec<Vec<f64>> = rows.iter().map(|r| map.loads(&r.rates)).collect();
    let n = rows.len();
    let mut values = Vec::with_capacity(n);
    let mut supply = Vec::with_capacity(n - 1);
    let audit = |e: Error| Error::Audit(format!("{}: {e}", block.name()));

    match block {
        Block::Flow { q_star, r_star } => {
            for k in 0..n {
                values.push(v1_storage(q_star, &rows[k].rates, r_star).map_err(audit)?);
                if k + 1 < n {
                    let s: f64 = (0..q_star.len())
                        .map(|p| -(rows[k].delays[p] - q_star[p]) * (rows[k + 1].rates[p] - rows[k].rates[p]))
                        .sum();
                    supply.push(s);
                }
            }
        }
        Block::Link { position, law, z_star, .. } => {
            let g_star = law.delay(*z_star);
            let bps = law.breakpoints();
            let mut v = v2_storage(law.as_ref(), loads[0][*position], *z_star).map_err(audit)?;
            values.push(v);
            for k in 0..n - 1 {
                let (a, b) = (loads[k][*position], loads[k + 1][*position]);
                v += quad::integrate(|s| law.delay(s) - g_star, a, b, &bps, QUAD_TOL).map_err(audit)?;
                values.push(v);
                supply.push((law.delay(b) - g_star) * (b - a));
            }
        }
        Block::InBand { position, curve, base, z_star, x_star, .. } => {
            let f_star = base.delay(*z_star);
            let b_star = curve.value(*x_star).map_err(audit)?;
            for k in 0..n {
                let z = loads[k][*position];
                let x = rows[k].x_compromise;
                values.push(vl_inband_storage(curve, base.as_ref(), z, x, *z_star, *x_star).map_err(audit)?);
                if k + 1 < n {
                    let z1 = loads[k + 1][*position];
                    let b1 = curve.value(rows[k + 1].x_compromise).map_err(audit)?;
                    supply.push((b1 * base.delay(z1) - b_star * f_star) * (z1 - z));
                }
            }
        }
        Block::Potential { laws, beta } => {
            let mut h: Vec<f64> = Vec::with_capacity(laws.len());
            for (l, law) in laws.iter().enumerate() {
                h.push(quad::integrate(|s| law.delay(s), 0.0, loads[0][l], &law.breakpoints(), QUAD_TOL).map_err(audit)?);
            }
            let total = |h: &[f64], x: f64| -> Result<f64> {
                let mut v: f64 = h.iter().sum();
                if let Some((pos, curve)) = beta {
                    v += (curve.value(x)? - 1.0) * h[*pos];
                }
                Ok(v)
            };
            values.push(total(&h, rows[0].x_compromise).map_err(audit)?);
            for k in 0..n - 1 {
                for (l, law) in laws.iter().enumerate() {
                    let (a, b) = (loads[k][l], loads[k + 1][l]);
                    if a != b {
                        h[l] += quad::integrate(|s| law.delay(s), a, b, &law.breakpoints(), QUAD_TOL).map_err(audit)?;
                    }
                }
                values.push(total(&h, rows[k + 1].x_compromise).map_err(audit)?);
                supply.push(0.0);
            }
        }
    }

    let mut violations = 0;
    let mut max_excess = f64::NEG_INFINITY;
    for k in 0..n - 1 {
        let dt = rows[k + 1].t - rows[k].t;
        if !(dt > 0.0) {
            return Err(Error::Audit(format!("time does not advance at row {k}")));
        }
        let excess = (values[k + 1] - values[k] - supply[k]) / dt;
        if !excess.is_finite() {
            return Err(Error::Audit(format!("{}: storage not finite at row {k}", block.name())));
        }
        max_excess = max_excess.max(excess);
        if excess > tol {
            violations += 1;
        }
    }
    Ok(StorageEval {
        block: block.name(),
        min_value: values.iter().copied().fold(f64::INFINITY, f64::min),
        supply_total: supply.iter().sum(),
        nonnegative: !matches!(block, Block::Potential { .. }),
        values,
        violations,
        max_excess,
    })
}

/// Builds every block storage for the scenario's loop and audits a trace of
/// it. The equilibrium comes from the static oracle at the compromise
/// fraction the trajectory settles to.
pub fn audit_run(asm: &SystemAssembly, trace: &SimTrace, tol: f64) -> Result<Vec<StorageEval>> {
    if trace.rows.len() < 2 {
        return Err(Error::Audit("trajectory needs at least two rows".into()));
    }
    let dt = trace.rows[1].t - trace.rows[0].t;
    let x_star = asm.x_limit(dt)?;
    let sol = asm.oracle(x_star, OracleOptions::default())?;
    let r_star: Vec<f64> = sol.rates.concat();

    let base = asm.base_laws(x_star)?;
    let leash = asm.leash_laws(x_star)?;
    let mut blocks = vec![Block::Flow { q_star: sol.path_delays.clone(), r_star }];
    for (l, model) in asm.models.iter().enumerate() {
        let id = asm.spec.links()[l].id;
        let z_star = sol.link_loads[l];
        if (0..asm.load_map.cols()).all(|p| asm.load_map.get(l, p) == 0.0) {
            continue;
        }
        match model {
            LinkModel::Access | LinkModel::IbReroute { .. } => {}
            LinkModel::Valid(_) | LinkModel::Oob(_) => {
                blocks.push(Block::Link { name: format!("link {id}"), position: l, law: base[l].clone(), z_star });
                if asm.mitigation[l].leash.is_some() {
                    blocks.push(Block::Link { name: format!("leash {id}"), position: l, law: leash[l].clone(), z_star });
                }
            }
            LinkModel::IbBeta { advertised, curve, .. } => blocks.push(Block::InBand {
                name: format!("in-band {id}"),
                position: l,
                curve: curve.clone(),
                base: Arc::new(*advertised),
                z_star,
                x_star: x_star.unwrap_or(0.0),
            }),
        }
    }

    let mut laws = asm.total_laws(x_star)?;
    let mut beta = None;
    if let Some(pos) = asm.beta_link() {
        if let LinkModel::IbBeta { advertised, curve, .. } = &asm.models[pos] {
            laws[pos] = Arc::new(*advertised);
            beta = Some((pos, curve.clone()));
        }
    }
    blocks.push(Block::Potential { laws, beta });

    blocks.iter().map(|b| audit_trajectory(trace, &asm.load_map, b, tol)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::link_models::FnLaw;

    #[test]
    fn storage_examples() {
        assert_eq!(v1_storage(&[1.0, 2.0], &[1.0, 1.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(v1_storage(&[1.0, 2.0], &[2.0, 0.0], &[1.0, 1.0]).unwrap(), -1.0);
        let affine = FnLaw(|r: f64| 1.0 + r);
        assert!((v2_storage(&affine, 3.0, 1.0).unwrap() - 2.0).abs() < 1e-12);
        assert!((v2_storage(&affine, 0.0, 1.0).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(v3_storage(&affine, 1.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn inband_storage_vanishes_at_equilibrium() {
        let curve = BetaCurve::from_points(vec![0.0, 1.0], vec![4.0, 2.0], vec![0.0, 0.0], 5.0).unwrap();
        let law = FnLaw(|r: f64| 1.0 + r);
        assert!(vl_inband_storage(&curve, &law, 2.0, 1.0, 2.0, 1.0).unwrap().abs() < 1e-12);
        assert!(vl_inband_storage(&curve, &law, 3.0, 0.5, 2.0, 1.0).unwrap() > 0.0);
    }
}
