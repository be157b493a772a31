//! Link delay laws and the out-of-band adversary's drop-rate choice.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::{HopGraph, NetworkSpec};

/// A static delay law `r_l -> delay`. Values may be infinite when the law
/// saturates; callers decide how to cap them.
pub trait DelayLaw: Send + Sync {
    fn delay(&self, r: f64) -> f64;

    /// Points where the law has a kink or jump, for quadrature splitting.
    fn breakpoints(&self) -> Vec<f64> {
        Vec::new()
    }
}

pub type SharedLaw = Arc<dyn DelayLaw>;

/// Drop probability of an M/M/1/K queue at utilization `rho`.
///
/// Evaluated as `rho^K / sum_{j<=K} rho^j`, which equals the textbook ratio
/// and stays finite at and above `rho = 1`.
pub fn mm1k_drop(rho: f64, queue_capacity: u32) -> Result<f64> {
    if !(rho >= 0.0) {
        return Err(Error::input(format!("utilization must be nonnegative, got {rho}")));
    }
    if rho == 0.0 {
        return Ok(0.0);
    }
    if rho.is_infinite() {
        return Ok(1.0);
    }
    let k = queue_capacity as i32;
    let p = if rho <= 1.0 {
        let mut sum = 0.0;
        let mut term = 1.0;
        for _ in 0..=k {
            sum += term;
            term *= rho;
        }
        rho.powi(k) / sum
    } else {
        let inv = 1.0 / rho;
        let mut sum = 0.0;
        let mut term = 1.0;
        for _ in 0..=k {
            sum += term;
            term *= inv;
        }
        1.0 / sum
    };
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidLinkLaw {
    pub capacity: f64,
    pub propagation_delay: f64,
    pub queue_capacity: u32,
}

impl ValidLinkLaw {
    pub fn drop_probability(&self, r: f64) -> Result<f64> {
        mm1k_drop(r / self.capacity, self.queue_capacity)
    }
}

/// Propagation delay times the expected number of transmissions.
pub fn valid_link_delay(r: f64, law: &ValidLinkLaw) -> Result<f64> {
    if !(r >= 0.0) {
        return Err(Error::input(format!("link rate must be nonnegative, got {r}")));
    }
    let pd = law.drop_probability(r)?;
    Ok(law.propagation_delay / (1.0 - pd))
}

impl DelayLaw for ValidLinkLaw {
    fn delay(&self, r: f64) -> f64 {
        valid_link_delay(r.max(0.0), self).unwrap_or(f64::INFINITY)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DropProfile {
    None,
    /// `(1 - 1/r)` above one unit of flow.
    Inverse,
    Constant(f64),
    /// Drops `phi` of the traffic once the link carries more than `threshold`.
    Threshold { threshold: f64, phi: f64 },
}

impl DropProfile {
    pub fn phi(&self, r: f64) -> f64 {
        match *self {
            DropProfile::None => 0.0,
            DropProfile::Inverse => sim_drop_profile(r),
            DropProfile::Constant(p) => p,
            DropProfile::Threshold { threshold, phi } => {
                if r > threshold {
                    phi
                } else {
                    0.0
                }
            }
        }
    }

    fn breakpoints(&self) -> Vec<f64> {
        match *self {
            DropProfile::Inverse => vec![1.0],
            DropProfile::Threshold { threshold, .. } => vec![threshold],
            _ => Vec::new(),
        }
    }
}

pub fn sim_drop_profile(r: f64) -> f64 {
    if r > 1.0 {
        1.0 - 1.0 / r
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OobWormholeLaw {
    pub propagation_delay: f64,
    pub profile: DropProfile,
}

pub fn oob_delay(r: f64, law: &OobWormholeLaw) -> Result<f64> {
    let phi = law.profile.phi(r);
    if phi >= 1.0 {
        return Err(Error::Saturation(format!("wormhole drop fraction {phi} at rate {r}")));
    }
    Ok(law.propagation_delay / (1.0 - phi))
}

impl DelayLaw for OobWormholeLaw {
    fn delay(&self, r: f64) -> f64 {
        oob_delay(r, self).unwrap_or(f64::INFINITY)
    }

    fn breakpoints(&self) -> Vec<f64> {
        self.profile.breakpoints()
    }
}

/// Delay credit the adversary expects to offer source `source`:
/// `zeta * (d(S, D) - d(S, W1) - d(W2, D))` over the legitimate graph.
pub fn delta_margin(spec: &NetworkSpec, source: usize, entry: &str, exit: &str) -> Result<f64> {
    let src = spec
        .sources()
        .get(source)
        .ok_or_else(|| Error::input(format!("no source at index {source}")))?;
    let graph = HopGraph::legitimate(spec);
    let hop = |a: &str, b: &str| -> Result<f64> {
        graph
            .distance(a, b)?
            .map(f64::from)
            .ok_or_else(|| Error::input(format!("{a} and {b} are disconnected")))
    };
    let direct = hop(&src.origin, &src.destination)?;
    let via = hop(&src.origin, entry)? + hop(exit, &src.destination)?;
    Ok(spec.per_hop_delay() * (direct - via))
}

/// Secondary adversary utility `slope * r + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AffineUtility {
    pub slope: f64,
    pub intercept: f64,
}

impl AffineUtility {
    pub fn eval(&self, r: f64) -> f64 {
        self.slope * r + self.intercept
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversaryPlan {
    pub margins: Vec<f64>,
    pub rates: Vec<f64>,
    pub epsilon: f64,
    pub utility: AffineUtility,
    /// Retained candidates as `(source rank, gamma, attracted flow, objective)`.
    pub candidates: Vec<(usize, f64, f64, f64)>,
    pub phi_star: f64,
    /// Flow the wormhole attracts at `phi_star`.
    pub flow: f64,
}

/// Picks the drop fraction maximizing `r*(phi) * phi + U(r*(phi))` among the
/// candidates `gamma_i = 1 - alpha / Delta_i - eps`.
pub fn optimal_drop_rate(
    margins: &[f64],
    rates: &[f64],
    alpha: f64,
    utility: AffineUtility,
    epsilon: f64,
) -> Result<AdversaryPlan> {
    if margins.len() != rates.len() {
        return Err(Error::input("margins and rates differ in length"));
    }
    if margins.windows(2).any(|w| !(w[0] > w[1])) {
        return Err(Error::input("margins must be strictly decreasing"));
    }
    if !(alpha > 0.0) || !(epsilon > 0.0) {
        return Err(Error::input("alpha and epsilon must be positive"));
    }

    let mut candidates = Vec::new();
    let mut attracted = 0.0;
    for (i, (&delta, &rate)) in margins.iter().zip(rates).enumerate() {
        attracted += rate;
        if delta <= 0.0 {
            continue;
        }
        let gamma = 1.0 - alpha / delta - epsilon;
        if gamma < 0.0 {
            continue;
        }
        let objective = attracted * gamma + utility.eval(attracted);
        candidates.push((i, gamma, attracted, objective));
    }

    let best = candidates.iter().fold(None::<&(usize, f64, f64, f64)>, |best, c| match best {
        Some(b) if b.3 > c.3 || (b.3 == c.3 && b.1 >= c.1) => Some(b),
        _ => Some(c),
    });
    let (phi_star, flow) = best.map(|c| (c.1, c.2)).unwrap_or((0.0, 0.0));

    Ok(AdversaryPlan {
        margins: margins.to_vec(),
        rates: rates.to_vec(),
        epsilon,
        utility,
        candidates,
        phi_star,
        flow,
    })
}

/// Sum of two laws on the same link.
pub struct SumLaw(pub SharedLaw, pub SharedLaw);

impl DelayLaw for SumLaw {
    fn delay(&self, r: f64) -> f64 {
        self.0.delay(r) + self.1.delay(r)
    }

    fn breakpoints(&self) -> Vec<f64> {
        let mut b = self.0.breakpoints();
        b.extend(self.1.breakpoints());
        b
    }
}

/// A law multiplied by a fixed factor.
pub struct ScaledLaw {
    pub factor: f64,
    pub base: SharedLaw,
}

impl DelayLaw for ScaledLaw {
    fn delay(&self, r: f64) -> f64 {
        self.factor * self.base.delay(r)
    }

    fn breakpoints(&self) -> Vec<f64> {
        self.base.breakpoints()
    }
}

/// Identically zero law (access stubs, disabled mitigation).
pub struct ZeroLaw;

impl DelayLaw for ZeroLaw {
    fn delay(&self, _r: f64) -> f64 {
        0.0
    }
}

/// Law given by a closure; mostly for tests and audits.
pub struct FnLaw<F>(pub F);

impl<F: Fn(f64) -> f64 + Send + Sync> DelayLaw for FnLaw<F> {
    fn delay(&self, r: f64) -> f64 {
        (self.0)(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mm1k_reference_points() {
        assert_eq!(mm1k_drop(0.0, 5).unwrap(), 0.0);
        assert!((mm1k_drop(0.5, 5).unwrap() - 0.015873015873).abs() < 1e-9);
        assert!((mm1k_drop(1.0, 5).unwrap() - 1.0 / 6.0).abs() < 1e-15);
        assert!(matches!(mm1k_drop(-0.1, 5), Err(Error::Input(_))));
    }

    #[test]
    fn mm1k_matches_direct_formula_away_from_one() {
        for &rho in &[0.1, 0.5, 0.9, 1.1, 2.0, 7.0] {
            let k = 5;
            let direct = (rho_pow(rho, k) - rho_pow(rho, k + 1)) / (1.0 - rho_pow(rho, k + 1));
            assert!((mm1k_drop(rho, k as u32).unwrap() - direct).abs() < 1e-12, "rho {rho}");
        }
    }

    fn rho_pow(rho: f64, k: i32) -> f64 {
        rho.powi(k)
    }

    #[test]
    fn mm1k_is_continuous_at_one() {
        let at = mm1k_drop(1.0, 5).unwrap();
        assert!((mm1k_drop(1.0 - 1e-9, 5).unwrap() - at).abs() < 1e-8);
        assert!((mm1k_drop(1.0 + 1e-9, 5).unwrap() - at).abs() < 1e-8);
        assert!(mm1k_drop(1e6, 5).unwrap() > 0.999);
    }

    #[test]
    fn valid_delay_reference_points() {
        let law = ValidLinkLaw { capacity: 2.0, propagation_delay: 1.0, queue_capacity: 5 };
        assert_eq!(valid_link_delay(0.0, &law).unwrap(), 1.0);
        assert!((valid_link_delay(1.0, &law).unwrap() - 1.016129032).abs() < 1e-8);
        let plant = ValidLinkLaw { capacity: 3.5, propagation_delay: 0.05, queue_capacity: 5 };
        assert_eq!(valid_link_delay(0.0, &plant).unwrap(), 0.05);
    }

    #[test]
    fn oob_delay_reference_points() {
        let law = OobWormholeLaw { propagation_delay: 2.0, profile: DropProfile::None };
        assert_eq!(oob_delay(3.0, &law).unwrap(), 2.0);
        let half = OobWormholeLaw { propagation_delay: 2.0, profile: DropProfile::Constant(0.5) };
        assert_eq!(oob_delay(0.0, &half).unwrap(), 4.0);
        let inv = OobWormholeLaw { propagation_delay: 2.0, profile: DropProfile::Inverse };
        assert_eq!(oob_delay(0.7, &inv).unwrap(), 2.0);
        let full = OobWormholeLaw { propagation_delay: 2.0, profile: DropProfile::Constant(1.0) };
        assert!(matches!(oob_delay(1.0, &full), Err(Error::Saturation(_))));
    }

    #[test]
    fn drop_profile_points() {
        assert_eq!(sim_drop_profile(0.5), 0.0);
        assert_eq!(sim_drop_profile(2.0), 0.5);
        assert_eq!(sim_drop_profile(4.0), 0.75);
    }

    #[test]
    fn optimal_drop_rate_two_sources() {
        let plan = optimal_drop_rate(&[8.0, 4.0], &[10.0, 5.0], 2.0, AffineUtility::default(), 0.01)
            .unwrap();
        let gammas: Vec<f64> = plan.candidates.iter().map(|c| c.1).collect();
        assert!((gammas[0] - 0.74).abs() < 1e-12 && (gammas[1] - 0.49).abs() < 1e-12);
        assert!((plan.candidates[0].3 - 7.4).abs() < 1e-12);
        assert!((plan.candidates[1].3 - 7.35).abs() < 1e-12);
        assert_eq!(plan.phi_star, plan.candidates[0].1);
        assert_eq!(plan.flow, 10.0);
    }

    #[test]
    fn optimal_drop_rate_degenerate_cases() {
        let none = optimal_drop_rate(&[1.5], &[3.0], 2.0, AffineUtility::default(), 0.01).unwrap();
        assert_eq!((none.phi_star, none.flow), (0.0, 0.0));

        let greedy = AffineUtility { slope: 1e6, intercept: 0.0 };
        let plan = optimal_drop_rate(&[8.0, 4.0, 3.0], &[1.0, 1.0, 1.0], 2.0, greedy, 0.01).unwrap();
        assert_eq!(plan.phi_star, plan.candidates.last().unwrap().1);
        assert_eq!(plan.flow, 3.0);
    }

    proptest! {
        #[test]
        fn mm1k_strictly_increasing(a in 0.001f64..20.0, b in 0.001f64..20.0, k in 1u32..30) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assume!(hi - lo > 1e-6);
            prop_assert!(mm1k_drop(lo, k).unwrap() < mm1k_drop(hi, k).unwrap());
        }

        #[test]
        fn delay_laws_nondecreasing(a in 0.0f64..30.0, b in 0.0f64..30.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let valid = ValidLinkLaw { capacity: 3.5, propagation_delay: 1.0, queue_capacity: 5 };
            prop_assert!(valid.delay(lo) <= valid.delay(hi));
            let oob = OobWormholeLaw { propagation_delay: 2.0, profile: DropProfile::Inverse };
            prop_assert!(oob.delay(lo) <= oob.delay(hi));
        }
    }
}
