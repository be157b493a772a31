//! Statistical detection of in-band wormholes and the rerouting delay model.

use rand::Rng;
use rand_distr::{Distribution, Exp};

use crate::error::{Error, Result};
use crate::topology::LinkId;

/// Draws an observed delay, exponentially distributed around the true mean.
pub fn sample_observed_delay<R: Rng + ?Sized>(true_mean: f64, rng: &mut R) -> Result<f64> {
    if !(true_mean > 0.0 && true_mean.is_finite()) {
        return Err(Error::input(format!("delay mean must be positive and finite, got {true_mean}")));
    }
    let exp = Exp::new(1.0 / true_mean).map_err(|e| Error::numerical(e.to_string()))?;
    Ok(exp.sample(rng))
}

/// Log-ratio test: flags the link when the observed delay exceeds the
/// delay its advertised parameters predict.
pub fn detect(observed: f64, expected: f64) -> Result<bool> {
    if !(observed > 0.0) || !(expected > 0.0) {
        return Err(Error::input(format!(
            "delays must be positive (observed {observed}, expected {expected})"
        )));
    }
    Ok((observed / expected).ln() > 0.0)
}

/// Turns delay observations into a belief that a link is a wormhole.
pub trait Belief: Send {
    fn update(&mut self, observed: f64, expected: f64) -> Result<f64>;
}

/// Belief is 1 after a failed log-ratio test and 0 otherwise.
#[derive(Debug, Clone, Copy, Default)]
pub struct LogRatioBelief;

impl Belief for LogRatioBelief {
    fn update(&mut self, observed: f64, expected: f64) -> Result<f64> {
        Ok(if detect(observed, expected)? { 1.0 } else { 0.0 })
    }
}

pub struct DetectorState {
    pub penalty: f64,
    pub threshold: f64,
    links: Vec<LinkId>,
    beliefs: Vec<f64>,
    testers: Vec<Box<dyn Belief>>,
}

impl std::fmt::Debug for DetectorState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DetectorState")
            .field("penalty", &self.penalty)
            .field("threshold", &self.threshold)
            .field("links", &self.links)
            .field("beliefs", &self.beliefs)
            .finish()
    }
}

impl DetectorState {
    pub fn new(links: Vec<LinkId>, penalty: f64, threshold: f64) -> Result<Self> {
        if !(penalty >= 0.0 && penalty.is_finite()) {
            return Err(Error::input("detection penalty must be finite and nonnegative"));
        }
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::input("belief threshold must lie in (0, 1)"));
        }
        let testers = links.iter().map(|_| Box::new(LogRatioBelief) as Box<dyn Belief>).collect();
        Ok(DetectorState { penalty, threshold, beliefs: vec![0.0; links.len()], links, testers })
    }

    /// Replaces the belief model of one monitored link.
    pub fn set_belief(&mut self, link: LinkId, belief: Box<dyn Belief>) -> Result<()> {
        let i = self.position(link).ok_or_else(|| Error::input(format!("link {link} is not monitored")))?;
        self.testers[i] = belief;
        Ok(())
    }

    pub fn links(&self) -> &[LinkId] {
        &self.links
    }

    fn position(&self, link: LinkId) -> Option<usize> {
        self.links.iter().position(|l| *l == link)
    }

    pub fn observe(&mut self, link: LinkId, observed: f64, expected: f64) -> Result<bool> {
        let i = self.position(link).ok_or_else(|| Error::input(format!("link {link} is not monitored")))?;
        self.beliefs[i] = self.testers[i].update(observed, expected)?;
        Ok(self.beliefs[i] > self.threshold)
    }

    pub fn detected(&self, link: LinkId) -> bool {
        self.position(link).map(|i| self.beliefs[i] > self.threshold).unwrap_or(false)
    }

    pub fn belief(&self, link: LinkId) -> Option<f64> {
        self.position(link).map(|i| self.beliefs[i])
    }
}

/// `K * 1(w_l > w_bar)`.
pub fn penalty_term(state: &DetectorState, link: LinkId) -> f64 {
    if state.detected(link) {
        state.penalty
    } else {
        0.0
    }
}

/// Delay perceived on a tunnel whose traffic is split over two real routes:
/// a fraction `lambda` rides route 1 and the rest route 2.
pub fn rerouted_path_delay<Q>(lambda: f64, r1: f64, r2: f64, r3: f64, q: Q) -> Result<f64>
where
    Q: Fn(usize, f64) -> f64,
{
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::input(format!("split {lambda} outside [0, 1]")));
    }
    if !(r1 >= 0.0 && r2 >= 0.0 && r3 >= 0.0) {
        return Err(Error::input("rates must be nonnegative"));
    }
    Ok(lambda * q(0, r1 + lambda * r3) + (1.0 - lambda) * q(1, r2 + (1.0 - lambda) * r3))
}
