//! Packet-leash mitigation: expiry-based drops turned into retransmission delay.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::link_models::{DelayLaw, SharedLaw};
use crate::topology::LinkKind;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DeltaMax {
    Constant(f64),
    /// `alpha_ref - 1 + 1/r`, infinite at zero flow.
    Adaptive { alpha_ref: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeashPolicy {
    /// Mean of the exponential clock-skew distribution.
    pub skew_mean: f64,
    pub delta_max: DeltaMax,
}

impl LeashPolicy {
    pub fn new(skew_mean: f64, delta_max: DeltaMax) -> Result<Self> {
        if !(skew_mean > 0.0 && skew_mean.is_finite()) {
            return Err(Error::input("skew mean must be positive"));
        }
        if let DeltaMax::Constant(v) = delta_max {
            if v.is_nan() {
                return Err(Error::input("delta_max must be a number"));
            }
        }
        Ok(LeashPolicy { skew_mean, delta_max })
    }

    pub fn delta_max(&self, r: f64) -> f64 {
        match self.delta_max {
            DeltaMax::Constant(v) => v,
            DeltaMax::Adaptive { alpha_ref } => {
                if r <= 0.0 {
                    f64::INFINITY
                } else {
                    alpha_ref - 1.0 + 1.0 / r
                }
            }
        }
    }

    /// `P(skew > threshold)`; thresholds at or below zero always expire.
    fn tail(&self, threshold: f64) -> f64 {
        if threshold <= 0.0 {
            1.0
        } else {
            (-threshold / self.skew_mean).exp()
        }
    }
}

/// Probability that a packet on a link of `kind` carrying `r` expires.
pub fn leash_drop_prob(kind: LinkKind, r: f64, policy: &LeashPolicy, alpha: f64, slack: f64) -> f64 {
    let dmax = policy.delta_max(r);
    match kind {
        LinkKind::Access => 0.0,
        LinkKind::Valid => policy.tail(dmax),
        LinkKind::OobWormhole | LinkKind::IbWormhole => policy.tail(dmax + slack - alpha),
    }
}

/// Extra delay from retransmitting expired packets: `(1/(1-P_d) - 1) f`.
pub fn leash_added_delay(pd: f64, base: f64) -> Result<f64> {
    if pd >= 1.0 {
        return Err(Error::Saturation(format!("leash drops every packet (P_d = {pd})")));
    }
    Ok((1.0 / (1.0 - pd) - 1.0) * base)
}

/// The leash's added delay as a static law of the link rate.
pub struct LeashAddedLaw {
    pub base: SharedLaw,
    pub policy: LeashPolicy,
    pub kind: LinkKind,
    pub alpha: f64,
    pub slack: f64,
}

impl LeashAddedLaw {
    pub fn drop_prob(&self, r: f64) -> f64 {
        leash_drop_prob(self.kind, r, &self.policy, self.alpha, self.slack)
    }

    pub fn shared(self) -> SharedLaw {
        Arc::new(self)
    }
}

impl DelayLaw for LeashAddedLaw {
    fn delay(&self, r: f64) -> f64 {
        let pd = self.drop_prob(r);
        leash_added_delay(pd, self.base.delay(r)).unwrap_or(f64::INFINITY)
    }

    fn breakpoints(&self) -> Vec<f64> {
        let mut b = self.base.breakpoints();
        // Where the wormhole threshold crosses zero under the adaptive rule.
        if let DeltaMax::Adaptive { alpha_ref } = self.policy.delta_max {
            let offset = match self.kind {
                LinkKind::Valid => 0.0,
                _ => self.slack - self.alpha,
            };
            let c = alpha_ref - 1.0 + offset;
            if c < 0.0 {
                b.push(-1.0 / c);
            }
        }
        b
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::link_models::{DropProfile, OobWormholeLaw, ValidLinkLaw};
    use proptest::prelude::*;

    fn adaptive(mean: f64) -> LeashPolicy {
        LeashPolicy::new(mean, DeltaMax::Adaptive { alpha_ref: 2.0 }).unwrap()
    }

    #[test]
    fn disabled_leash_never_drops() {
        let p = LeashPolicy::new(1.0, DeltaMax::Constant(f64::INFINITY)).unwrap();
        assert_eq!(leash_drop_prob(LinkKind::Valid, 3.0, &p, 1.0, 0.0), 0.0);
    }

    #[test]
    fn valid_link_tail_at_unit_rate() {
        let p = adaptive(1.0);
        assert_eq!(p.delta_max(1.0), 2.0);
        let pd = leash_drop_prob(LinkKind::Valid, 1.0, &p, 2.0, 0.0);
        assert!((pd - (-2.0f64).exp()).abs() < 1e-15);
        assert!((pd - 0.1353).abs() < 1e-4);
    }

    #[test]
    fn adaptive_rule_shape() {
        let p = adaptive(1.0);
        assert_eq!(p.delta_max(0.0), f64::INFINITY);
        assert!((p.delta_max(4.0) - 1.25).abs() < 1e-15);
    }

    #[test]
    fn negative_threshold_always_expires() {
        let p = LeashPolicy::new(0.05, DeltaMax::Constant(0.04)).unwrap();
        assert_eq!(leash_drop_prob(LinkKind::OobWormhole, 1.0, &p, 0.1, 0.0), 1.0);
    }

    #[test]
    fn added_delay_points() {
        assert_eq!(leash_added_delay(0.0, 3.0).unwrap(), 0.0);
        assert_eq!(leash_added_delay(0.5, 1.0).unwrap(), 1.0);
        assert!(matches!(leash_added_delay(1.0, 1.0), Err(Error::Saturation(_))));
    }

    #[test]
    fn plant_delta_max_settings_differ_on_valid_links() {
        let valid = ValidLinkLaw { capacity: 3.5, propagation_delay: 0.05, queue_capacity: 5 };
        let f = valid.delay(2.0);
        let tight = LeashPolicy::new(0.05, DeltaMax::Constant(0.04)).unwrap();
        let loose = LeashPolicy::new(0.05, DeltaMax::Constant(0.1)).unwrap();
        let a = leash_added_delay(leash_drop_prob(LinkKind::Valid, 2.0, &tight, 0.05, 0.0), f).unwrap();
        let b = leash_added_delay(leash_drop_prob(LinkKind::Valid, 2.0, &loose, 0.05, 0.0), f).unwrap();
        assert!(a > b && b > 0.0);
    }

    #[test]
    fn wormhole_drops_at_least_as_often_as_valid_links() {
        // Canonical parameters: valid alpha 1, wormhole alpha 2, slack 1.
        let p = adaptive(1.0);
        for i in 1..200 {
            let r = i as f64 * 0.1;
            let valid = leash_drop_prob(LinkKind::Valid, r, &p, 1.0, 0.0);
            let worm = leash_drop_prob(LinkKind::OobWormhole, r, &p, 2.0, 1.0);
            assert!(worm >= valid, "r {r}");
        }
    }

    proptest! {
        #[test]
        fn adaptive_added_delay_nondecreasing(a in 0.0f64..20.0, b in 0.0f64..20.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let valid = LeashAddedLaw {
                base: Arc::new(ValidLinkLaw { capacity: 3.5, propagation_delay: 1.0, queue_capacity: 5 }),
                policy: adaptive(1.0),
                kind: LinkKind::Valid,
                alpha: 1.0,
                slack: 0.0,
            };
            prop_assert!(valid.delay(lo) >= 0.0);
            prop_assert!(valid.delay(lo) <= valid.delay(hi) + 1e-12);
            let worm = LeashAddedLaw {
                base: Arc::new(OobWormholeLaw { propagation_delay: 2.0, profile: DropProfile::Inverse }),
                policy: adaptive(1.0),
                kind: LinkKind::OobWormhole,
                alpha: 2.0,
                slack: 1.0,
            };
            prop_assert!(worm.delay(lo) <= worm.delay(hi) + 1e-12);
        }
    }
}
