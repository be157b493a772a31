//! Feedback interconnection of flow allocation, link delay laws and
//! mitigation, and the simulation loop that drives it.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::config::{IbMode, LeashMode, ProfileKind, ScenarioConfig};
use crate::error::{Error, Result};
use crate::flow_dynamics::{
    equilibrium_oracle, wardrop_step, FlowState, LoadMap, OracleOptions, OracleSolution, PathDelays,
};
use crate::ib_mitigation::{sample_observed_delay, DetectorState};
use crate::ib_wormhole::{beta_curve, beta_derivative, compromise_limit, compromise_step, BetaCurve, CompromiseState};
use crate::link_models::{
    delta_margin, optimal_drop_rate, AdversaryPlan, AffineUtility, DelayLaw, DropProfile, FnLaw,
    OobWormholeLaw, ScaledLaw, SharedLaw, ValidLinkLaw, ZeroLaw,
};
use crate::oob_mitigation::{leash_drop_prob, DeltaMax, LeashAddedLaw, LeashPolicy};
use crate::plant::{AdversaryPolicy, PlantConfig};
use crate::rng;
use crate::topology::{build_incidence, link_rates, HopGraph, IncidenceMatrix, LinkId, LinkKind, NetworkSpec};

#[derive(Debug, Clone)]
pub enum LinkModel {
    Access,
    Valid(ValidLinkLaw),
    Oob(OobWormholeLaw),
    /// Tunnel whose length follows the compromise fraction.
    IbBeta { advertised: ValidLinkLaw, curve: Arc<BetaCurve>, cost: f64 },
    /// Tunnel traffic carried by two real routes (link positions), split
    /// `lambda : 1 - lambda`.
    IbReroute { advertised: ValidLinkLaw, lambda: f64, route_a: Vec<usize>, route_b: Vec<usize> },
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LinkMitigation {
    pub leash: Option<LeashPolicy>,
    pub detector: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimParams {
    pub dt: f64,
    pub horizon: f64,
    pub seed: u64,
    pub window: usize,
    pub tol: f64,
    pub ceiling: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorSettings {
    pub penalty: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone)]
pub struct SystemAssembly {
    pub spec: NetworkSpec,
    pub incidence: IncidenceMatrix,
    pub load_map: LoadMap,
    pub models: Vec<LinkModel>,
    pub mitigation: Vec<LinkMitigation>,
    pub detector: Option<DetectorSettings>,
    pub plan: Option<AdversaryPlan>,
    pub initial: FlowState,
    /// Starting compromise fraction when an in-band tunnel follows beta(x).
    pub x0: Option<f64>,
    pub sim: SimParams,
    pub plant: Option<(PlantConfig, AdversaryPolicy)>,
}

fn need<T: Copy>(v: Option<T>, what: &str) -> Result<T> {
    v.ok_or_else(|| Error::config(format!("missing {what}")))
}

/// Builds the interconnection described by a scenario.
pub fn assemble(cfg: &ScenarioConfig) -> Result<SystemAssembly> {
    let spec = cfg.network_spec()?;
    let incidence = build_incidence(&spec);
    let mut load_map = LoadMap::from_incidence(&incidence);
    let position = |id: u32| -> Result<usize> {
        spec.link_position(LinkId(id))
            .ok_or_else(|| Error::config(format!("unknown link {id}")))
    };

    let mut models: Vec<LinkModel> = spec
        .links()
        .iter()
        .map(|l| match l.kind {
            LinkKind::Access => LinkModel::Access,
            LinkKind::Valid => LinkModel::Valid(valid_law(l)),
            LinkKind::OobWormhole => LinkModel::Oob(OobWormholeLaw {
                propagation_delay: l.propagation_delay,
                profile: DropProfile::None,
            }),
            // Replaced below; an in-band link without an adversary section
            // behaves like the one-hop link it claims to be.
            LinkKind::IbWormhole => LinkModel::Valid(valid_law(l)),
        })
        .collect();

    let mut plan = None;
    let mut threshold_profile = None;
    if let Some(oob) = &cfg.adversary.oob {
        let pos = position(oob.link)?;
        let link = &spec.links()[pos];
        if link.kind != LinkKind::OobWormhole {
            return Err(Error::config(format!("adversary.oob.link {} is not an out-of-band wormhole", oob.link)));
        }
        let profile = match oob.profile {
            ProfileKind::None => DropProfile::None,
            ProfileKind::Inverse => DropProfile::Inverse,
            ProfileKind::Constant => {
                let phi = need(oob.phi, "adversary.oob.phi")?;
                if !(0.0..1.0).contains(&phi) {
                    return Err(Error::config("adversary.oob.phi must lie in [0, 1)"));
                }
                DropProfile::Constant(phi)
            }
            ProfileKind::Threshold => {
                let phi = need(oob.phi, "adversary.oob.phi")?;
                let threshold = need(oob.threshold, "adversary.oob.threshold")?;
                if !(0.0..1.0).contains(&phi) || !(threshold >= 0.0) {
                    return Err(Error::config("adversary.oob: phi must lie in [0, 1) and threshold be nonnegative"));
                }
                threshold_profile = Some((threshold, phi));
                DropProfile::Threshold { threshold, phi }
            }
            ProfileKind::Optimal => {
                let entry = oob.entry.as_deref().ok_or_else(|| Error::config("missing adversary.oob.entry"))?;
                let exit = oob.exit.as_deref().ok_or_else(|| Error::config("missing adversary.oob.exit"))?;
                let mut ranked: Vec<(f64, f64)> = Vec::new();
                for (i, src) in spec.sources().iter().enumerate() {
                    let margin = delta_margin(&spec, i, entry, exit).map_err(|e| Error::config(e.to_string()))?;
                    match ranked.iter_mut().find(|(m, _)| *m == margin) {
                        Some(slot) => slot.1 += src.rate,
                        None => ranked.push((margin, src.rate)),
                    }
                }
                ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
                let margins: Vec<f64> = ranked.iter().map(|r| r.0).collect();
                let rates: Vec<f64> = ranked.iter().map(|r| r.1).collect();
                let utility = AffineUtility {
                    slope: oob.utility_slope.unwrap_or(0.0),
                    intercept: oob.utility_intercept.unwrap_or(0.0),
                };
                let p = optimal_drop_rate(&margins, &rates, link.propagation_delay, utility, oob.epsilon.unwrap_or(0.01))?;
                let phi = p.phi_star;
                plan = Some(p);
                DropProfile::Constant(phi)
            }
        };
        models[pos] = LinkModel::Oob(OobWormholeLaw { propagation_delay: link.propagation_delay, profile });
    }

    let mut x0 = None;
    if let Some(ib) = &cfg.adversary.ib {
        let pos = position(ib.link)?;
        let link = &spec.links()[pos];
        if link.kind != LinkKind::IbWormhole {
            return Err(Error::config(format!("adversary.ib.link {} is not an in-band wormhole", ib.link)));
        }
        let advertised = valid_law(link);
        models[pos] = match ib.mode {
            IbMode::Beta => {
                let entry = ib.entry.as_deref().ok_or_else(|| Error::config("missing adversary.ib.entry"))?;
                let exit = ib.exit.as_deref().ok_or_else(|| Error::config("missing adversary.ib.exit"))?;
                let grid = ib
                    .grid
                    .clone()
                    .unwrap_or_else(|| (1..=10).map(|k| k as f64 / 10.0).collect());
                let graph = HopGraph::legitimate(&spec);
                let curve = beta_curve(&graph, entry, exit, &grid, ib.trials.unwrap_or(2000), cfg.sim.seed, ib.fallback)
                    .map_err(|e| Error::config(format!("adversary.ib: {e}")))?;
                if curve.xs.len() < 2 {
                    return Err(Error::config("adversary.ib.grid needs at least two points"));
                }
                let start = ib.x0.unwrap_or(curve.range().0);
                let (lo, hi) = curve.range();
                if !(start >= lo && start <= hi) {
                    return Err(Error::config(format!("adversary.ib.x0 = {start} outside the grid [{lo}, {hi}]")));
                }
                let cost = need(ib.cost, "adversary.ib.cost")?;
                if !(cost > 0.0) {
                    return Err(Error::config("adversary.ib.cost must be positive"));
                }
                x0 = Some(start);
                LinkModel::IbBeta { advertised, curve: Arc::new(curve), cost }
            }
            IbMode::Reroute => {
                let lambda = need(ib.lambda, "adversary.ib.lambda")?;
                if !(0.0..=1.0).contains(&lambda) {
                    return Err(Error::config("adversary.ib.lambda must lie in [0, 1]"));
                }
                let route = |r: &Option<Vec<u32>>, name: &str| -> Result<Vec<usize>> {
                    let ids = r.as_ref().ok_or_else(|| Error::config(format!("missing adversary.ib.{name}")))?;
                    ids.iter()
                        .map(|&id| {
                            let p = position(id)?;
                            if spec.links()[p].kind == LinkKind::IbWormhole {
                                return Err(Error::config(format!("adversary.ib.{name} may not contain in-band link {id}")));
                            }
                            Ok(p)
                        })
                        .collect()
                };
                let route_a = route(&ib.route_a, "route_a")?;
                let route_b = route(&ib.route_b, "route_b")?;
                for p in 0..incidence.cols() {
                    if incidence.get(pos, p) == 1 {
                        load_map.set(pos, p, 0.0);
                        for &l in &route_a {
                            load_map.add(l, p, lambda);
                        }
                        for &l in &route_b {
                            load_map.add(l, p, 1.0 - lambda);
                        }
                    }
                }
                LinkModel::IbReroute { advertised, lambda, route_a, route_b }
            }
        };
    }
    let beta_links = models.iter().filter(|m| matches!(m, LinkModel::IbBeta { .. })).count();
    if beta_links > 1 {
        return Err(Error::config("at most one in-band tunnel can follow the compromise dynamics"));
    }

    let mut mitigation = vec![LinkMitigation::default(); spec.links().len()];
    if let Some(leash) = &cfg.mitigation.leash {
        let delta_max = match leash.policy {
            LeashMode::Adaptive => DeltaMax::Adaptive { alpha_ref: leash.alpha_ref.unwrap_or(2.0) },
            LeashMode::Constant => DeltaMax::Constant(need(leash.delta_max, "mitigation.leash.delta_max")?),
        };
        let policy = LeashPolicy::new(leash.skew_mean, delta_max).map_err(|e| Error::config(e.to_string()))?;
        let targets: Vec<usize> = match &leash.links {
            Some(ids) => ids.iter().map(|&id| position(id)).collect::<Result<_>>()?,
            None => (0..spec.links().len())
                .filter(|&p| matches!(spec.links()[p].kind, LinkKind::Valid | LinkKind::OobWormhole))
                .collect(),
        };
        for p in targets {
            match spec.links()[p].kind {
                LinkKind::Valid | LinkKind::OobWormhole => mitigation[p].leash = Some(policy),
                LinkKind::IbWormhole => {
                    return Err(Error::config(format!(
                        "packet leash cannot protect in-band link {}",
                        spec.links()[p].id
                    )))
                }
                LinkKind::Access => {
                    return Err(Error::config(format!("access link {} takes no mitigation", spec.links()[p].id)))
                }
            }
        }
    }
    let mut detector = None;
    if let Some(det) = &cfg.mitigation.detector {
        let targets: Vec<usize> = match &det.links {
            Some(ids) => ids.iter().map(|&id| position(id)).collect::<Result<_>>()?,
            None => (0..spec.links().len())
                .filter(|&p| matches!(spec.links()[p].kind, LinkKind::Valid | LinkKind::IbWormhole))
                .collect(),
        };
        for p in targets {
            match spec.links()[p].kind {
                LinkKind::Valid | LinkKind::IbWormhole => mitigation[p].detector = true,
                LinkKind::OobWormhole => {
                    return Err(Error::config(format!(
                        "statistical detector cannot monitor out-of-band link {}",
                        spec.links()[p].id
                    )))
                }
                LinkKind::Access => {
                    return Err(Error::config(format!("access link {} takes no mitigation", spec.links()[p].id)))
                }
            }
        }
        DetectorState::new(Vec::new(), det.penalty, det.threshold).map_err(|e| Error::config(e.to_string()))?;
        detector = Some(DetectorSettings { penalty: det.penalty, threshold: det.threshold });
    }

    let initial = if cfg.sources.iter().all(|s| s.initial.is_none()) {
        FlowState::uniform(&spec)
    } else {
        let rates = cfg
            .sources
            .iter()
            .zip(spec.sources())
            .map(|(s, src)| {
                s.initial
                    .clone()
                    .unwrap_or_else(|| vec![src.rate / src.paths.len() as f64; src.paths.len()])
            })
            .collect();
        FlowState::new(&spec, rates).map_err(|e| Error::config(e.to_string()))?
    };

    let plant = match &cfg.plant {
        None => None,
        Some(p) => {
            let source = spec
                .sources()
                .iter()
                .position(|s| s.id == p.source)
                .ok_or_else(|| Error::config(format!("plant.source {} is not a source", p.source)))?;
            let policy = match (&cfg.adversary.oob, threshold_profile) {
                (Some(oob), Some((threshold, _))) => AdversaryPolicy {
                    link: LinkId(oob.link),
                    low_latency_delay: spec.link(LinkId(oob.link)).map(|l| l.propagation_delay).unwrap_or(0.0),
                    flow_threshold: threshold,
                    drop_probability: p.drop_probability,
                },
                _ => AdversaryPolicy::disabled(),
            };
            let config = PlantConfig { period: p.period, gain: p.gain, noise_std: p.noise_std, x0: p.x0, source };
            Some((config, policy))
        }
    };

    Ok(SystemAssembly {
        spec,
        incidence,
        load_map,
        models,
        mitigation,
        detector,
        plan,
        initial,
        x0,
        sim: SimParams {
            dt: cfg.sim.dt,
            horizon: cfg.sim.horizon,
            seed: cfg.sim.seed,
            window: cfg.sim.window,
            tol: cfg.sim.tol,
            ceiling: cfg.sim.ceiling,
        },
        plant,
    })
}

fn valid_law(l: &crate::topology::LinkSpec) -> ValidLinkLaw {
    ValidLinkLaw {
        capacity: l.capacity,
        propagation_delay: l.propagation_delay,
        queue_capacity: l.queue_capacity,
    }
}

/// All link and path quantities at one allocation.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// `(A r)_l`.
    pub link_rates: Vec<f64>,
    /// Traffic each link physically carries.
    pub loads: Vec<f64>,
    pub base: Vec<f64>,
    pub leash: Vec<f64>,
    pub penalty: Vec<f64>,
    pub drop: Vec<f64>,
    /// Delays the sources route on, penalties included.
    pub routing: Vec<f64>,
    /// Delays the traffic actually experiences.
    pub experienced: Vec<f64>,
    pub saturated: Vec<bool>,
}

/// `min(v, ceiling)`, treating non-finite values as saturated.
fn cap(v: f64, ceiling: f64) -> (f64, bool) {
    if v.is_finite() && v <= ceiling {
        (v, false)
    } else {
        (ceiling, true)
    }
}

impl SystemAssembly {
    pub fn link_ids(&self) -> Vec<LinkId> {
        self.spec.links().iter().map(|l| l.id).collect()
    }

    /// Position of the tunnel following the compromise dynamics, if any.
    pub fn beta_link(&self) -> Option<usize> {
        self.models.iter().position(|m| matches!(m, LinkModel::IbBeta { .. }))
    }

    pub fn beta_curve(&self) -> Option<(&BetaCurve, f64)> {
        self.models.iter().find_map(|m| match m {
            LinkModel::IbBeta { curve, cost, .. } => Some((curve.as_ref(), *cost)),
            _ => None,
        })
    }

    /// Where the compromise dynamics come to rest from `x0`.
    pub fn x_limit(&self, dt: f64) -> Result<Option<f64>> {
        match (self.beta_curve(), self.x0) {
            (Some((curve, cost)), Some(x0)) => Ok(Some(compromise_limit(curve, cost, x0, dt, 10_000_000)?)),
            _ => Ok(None),
        }
    }

    pub fn with_initial(&self, initial: FlowState) -> SystemAssembly {
        SystemAssembly { initial, ..self.clone() }
    }

    pub fn evaluate(&self, rates: &[f64], x: Option<f64>, penalties: &[f64]) -> Result<Evaluation> {
        let n = self.spec.links().len();
        let ceiling = self.sim.ceiling;
        let nominal = link_rates(&self.incidence, rates)?;
        let loads: Vec<f64> = self.load_map.loads(rates).into_iter().map(|z| z.max(0.0)).collect();
        let mut base = vec![0.0; n];
        let mut leash = vec![0.0; n];
        let mut drop = vec![0.0; n];
        let mut saturated = vec![false; n];

        for (l, model) in self.models.iter().enumerate() {
            let z = loads[l];
            let (raw, pd) = match model {
                LinkModel::Access | LinkModel::IbReroute { .. } => continue,
                LinkModel::Valid(law) => (law.delay(z), law.drop_probability(z)?),
                LinkModel::Oob(law) => (law.delay(z), law.profile.phi(z)),
                LinkModel::IbBeta { advertised, curve, .. } => {
                    let x = x.ok_or_else(|| Error::input("compromise fraction required"))?;
                    (curve.value(x)? * advertised.delay(z), 0.0)
                }
            };
            let (b, sat) = cap(raw, ceiling);
            base[l] = b;
            saturated[l] = sat;
            drop[l] = pd;
            if let Some(policy) = &self.mitigation[l].leash {
                let link = &self.spec.links()[l];
                let p = leash_drop_prob(link.kind, z, policy, link.propagation_delay, link.slack);
                let added = if p >= 1.0 { f64::INFINITY } else { (1.0 / (1.0 - p) - 1.0) * b };
                let (a, sat) = cap(added, ceiling - b);
                leash[l] = a;
                saturated[l] |= sat && p > 0.0;
                drop[l] = 1.0 - (1.0 - drop[l]) * (1.0 - p);
            }
        }
        for (l, model) in self.models.iter().enumerate() {
            if let LinkModel::IbReroute { lambda, route_a, route_b, .. } = model {
                let sum = |route: &[usize]| route.iter().map(|&k| base[k] + leash[k]).sum::<f64>();
                let (b, sat) = cap(lambda * sum(route_a) + (1.0 - lambda) * sum(route_b), ceiling);
                base[l] = b;
                saturated[l] = sat;
            }
        }

        let penalty = if penalties.is_empty() { vec![0.0; n] } else { penalties.to_vec() };
        let experienced_link: Vec<f64> = (0..n).map(|l| base[l] + leash[l]).collect();
        let routing_link: Vec<f64> = (0..n).map(|l| experienced_link[l] + penalty[l]).collect();
        let a = &self.incidence;
        let sum_over = |v: &[f64]| -> Vec<f64> {
            (0..a.cols())
                .map(|p| (0..a.rows()).filter(|&l| a.get(l, p) == 1).map(|l| v[l]).sum())
                .collect()
        };
        Ok(Evaluation {
            routing: sum_over(&routing_link),
            experienced: sum_over(&experienced_link),
            link_rates: nominal,
            loads,
            base,
            leash,
            penalty,
            drop,
            saturated,
        })
    }

    /// Delay the detector expects on a link from its advertised parameters.
    fn expected_delay(&self, l: usize, nominal: f64) -> f64 {
        match &self.models[l] {
            LinkModel::Valid(law) => law.delay(nominal),
            LinkModel::IbBeta { advertised, .. } | LinkModel::IbReroute { advertised, .. } => advertised.delay(nominal),
            LinkModel::Oob(law) => law.propagation_delay,
            LinkModel::Access => 0.0,
        }
    }

    /// Per-link base laws at a frozen compromise fraction, capped at the
    /// ceiling. In-band reroute links contribute through their routes.
    pub fn base_laws(&self, x: Option<f64>) -> Result<Vec<SharedLaw>> {
        let ceiling = self.sim.ceiling;
        self.models
            .iter()
            .map(|m| -> Result<SharedLaw> {
                let raw: SharedLaw = match m {
                    LinkModel::Access | LinkModel::IbReroute { .. } => return Ok(Arc::new(ZeroLaw)),
                    LinkModel::Valid(law) => Arc::new(*law),
                    LinkModel::Oob(law) => Arc::new(*law),
                    LinkModel::IbBeta { advertised, curve, .. } => {
                        let x = x.ok_or_else(|| Error::input("compromise fraction required"))?;
                        Arc::new(ScaledLaw { factor: curve.value(x)?, base: Arc::new(*advertised) })
                    }
                };
                Ok(capped(raw, ceiling))
            })
            .collect()
    }

    /// Leash-added laws, capped so base plus added never exceeds the ceiling.
    pub fn leash_laws(&self, x: Option<f64>) -> Result<Vec<SharedLaw>> {
        let ceiling = self.sim.ceiling;
        let base = self.base_laws(x)?;
        Ok(self
            .spec
            .links()
            .iter()
            .enumerate()
            .map(|(l, link)| -> SharedLaw {
                match &self.mitigation[l].leash {
                    None => Arc::new(ZeroLaw),
                    Some(policy) => {
                        let added = LeashAddedLaw {
                            base: base[l].clone(),
                            policy: *policy,
                            kind: link.kind,
                            alpha: link.propagation_delay,
                            slack: link.slack,
                        };
                        let b = base[l].clone();
                        let bps = added.breakpoints();
                        Arc::new(WithBreaks {
                            law: FnLaw(move |r: f64| {
                                let pd = added.drop_prob(r);
                                let v = if pd >= 1.0 { f64::INFINITY } else { added.delay(r) };
                                cap(v, ceiling - b.delay(r)).0
                            }),
                            breaks: bps,
                        })
                    }
                }
            })
            .collect())
    }

    /// Base plus leash laws.
    pub fn total_laws(&self, x: Option<f64>) -> Result<Vec<SharedLaw>> {
        let base = self.base_laws(x)?;
        let leash = self.leash_laws(x)?;
        Ok(base
            .into_iter()
            .zip(leash)
            .map(|(b, a)| Arc::new(crate::link_models::SumLaw(b, a)) as SharedLaw)
            .collect())
    }

    /// Equilibrium of the static (detector-free) laws at compromise `x`.
    pub fn oracle(&self, x: Option<f64>, opts: OracleOptions) -> Result<OracleSolution> {
        equilibrium_oracle(&self.spec, &self.load_map, &self.total_laws(x)?, opts)
    }
}

fn capped(law: SharedLaw, ceiling: f64) -> SharedLaw {
    let bps = law.breakpoints();
    Arc::new(WithBreaks { law: FnLaw(move |r: f64| cap(law.delay(r), ceiling).0), breaks: bps })
}

struct WithBreaks<L> {
    law: L,
    breaks: Vec<f64>,
}

impl<L: DelayLaw> DelayLaw for WithBreaks<L> {
    fn delay(&self, r: f64) -> f64 {
        self.law.delay(r)
    }

    fn breakpoints(&self) -> Vec<f64> {
        self.breaks.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Saturation,
    AdversaryTriggered,
    AdversaryReleased,
    TimingViolation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimEvent {
    pub t: f64,
    pub kind: EventKind,
    pub link: Option<LinkId>,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantSample {
    pub x: f64,
    pub u: f64,
    pub tau: f64,
    pub dropped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    /// Stacked per-source path rates.
    pub rates: Vec<f64>,
    /// Routing delays per path (penalties included).
    pub delays: Vec<f64>,
    /// Experienced delays per path (penalties excluded).
    pub experienced: Vec<f64>,
    pub link_rates: Vec<f64>,
    pub link_delays: Vec<f64>,
    pub mitigation: Vec<f64>,
    pub drop: Vec<f64>,
    pub detect: Vec<bool>,
    pub x_compromise: f64,
    pub adversary_triggered: bool,
    pub plant: Option<PlantSample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceLayout {
    pub source_ids: Vec<u32>,
    pub path_counts: Vec<usize>,
    pub link_ids: Vec<LinkId>,
}

impl TraceLayout {
    pub fn of(spec: &NetworkSpec) -> Self {
        TraceLayout {
            source_ids: spec.sources().iter().map(|s| s.id).collect(),
            path_counts: spec.sources().iter().map(|s| s.paths.len()).collect(),
            link_ids: spec.links().iter().map(|l| l.id).collect(),
        }
    }

    pub fn path_range(&self, source: usize) -> std::ops::Range<usize> {
        let start: usize = self.path_counts[..source].iter().sum();
        start..start + self.path_counts[source]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub layout: TraceLayout,
    pub totals: Vec<f64>,
    pub rows: Vec<TraceRow>,
    pub events: Vec<SimEvent>,
}

impl SimTrace {
    pub fn last(&self) -> &TraceRow {
        self.rows.last().expect("a trace always holds its initial row")
    }

    pub fn has_plant(&self) -> bool {
        self.rows.first().is_some_and(|r| r.plant.is_some())
    }

    pub fn link_index(&self, id: LinkId) -> Option<usize> {
        self.layout.link_ids.iter().position(|l| *l == id)
    }

    /// Flow-weighted mean delay over all sources in `row`.
    pub fn mean_delay(&self, row: &TraceRow, experienced: bool) -> f64 {
        let q = if experienced { &row.experienced } else { &row.delays };
        let total: f64 = self.totals.iter().sum();
        row.rates.iter().zip(q).map(|(r, d)| r * d).sum::<f64>() / total
    }

    /// Flow-weighted mean delay of one source in `row`.
    pub fn source_delay(&self, row: &TraceRow, source: usize, experienced: bool) -> f64 {
        let q = if experienced { &row.experienced } else { &row.delays };
        let range = self.layout.path_range(source);
        range.clone().map(|p| row.rates[p] * q[p]).sum::<f64>() / self.totals[source]
    }
}

/// True when every rate in the trailing `window` rows stays within `tol` of
/// its final value.
pub fn converged(trace: &SimTrace, window: usize, tol: f64) -> bool {
    let n = trace.rows.len();
    if window == 0 || window > n {
        return false;
    }
    let last = &trace.rows[n - 1].rates;
    trace.rows[n - window..]
        .iter()
        .all(|row| row.rates.iter().zip(last).all(|(a, b)| (a - b).abs() < tol))
}

/// Step-by-step driver shared by [`simulate`] and the plant co-simulation.
pub struct Simulator<'a> {
    asm: &'a SystemAssembly,
    dt: f64,
    state: FlowState,
    x: Option<f64>,
    penalties: Vec<f64>,
    next_penalties: Vec<f64>,
    detector: Option<DetectorState>,
    detector_rngs: Vec<(usize, ChaCha8Rng)>,
    trace: SimTrace,
    saturated: Vec<bool>,
    triggered: bool,
    last_q: Option<PathDelays>,
    compromise: Option<CompromiseState>,
    t0: f64,
    steps: u64,
}

impl<'a> Simulator<'a> {
    pub fn new(asm: &'a SystemAssembly, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::input(format!("dt must be positive, got {dt}")));
        }
        let n = asm.spec.links().len();
        let monitored: Vec<usize> = (0..n).filter(|&l| asm.mitigation[l].detector).collect();
        let detector = match asm.detector {
            Some(d) => Some(DetectorState::new(
                monitored.iter().map(|&l| asm.spec.links()[l].id).collect(),
                d.penalty,
                d.threshold,
            )?),
            None => None,
        };
        let detector_rngs = monitored
            .iter()
            .map(|&l| (l, rng::stream(asm.sim.seed, rng::DETECTOR_BASE + u64::from(asm.spec.links()[l].id.0))))
            .collect();
        let compromise = asm.beta_link().map(|_| CompromiseState {
            x: asm.x0.unwrap_or(0.0),
            cost: asm.beta_curve().map(|c| c.1).unwrap_or(0.0),
            entry: String::new(),
            exit: String::new(),
        });
        Ok(Simulator {
            asm,
            dt,
            state: asm.initial.clone(),
            x: compromise.as_ref().map(|c| c.x),
            penalties: vec![0.0; n],
            next_penalties: vec![0.0; n],
            detector,
            detector_rngs,
            trace: SimTrace {
                layout: TraceLayout::of(&asm.spec),
                totals: asm.initial.totals.clone(),
                rows: Vec::new(),
                events: Vec::new(),
            },
            saturated: vec![false; n],
            triggered: false,
            last_q: None,
            compromise,
            t0: asm.initial.t,
            steps: 0,
        })
    }

    pub fn state(&self) -> &FlowState {
        &self.state
    }

    /// Evaluates the current state, runs the detectors and appends a row.
    pub fn record(&mut self) -> Result<&mut TraceRow> {
        let asm = self.asm;
        let t = self.state.t;
        let rates = self.state.stacked();
        let ev = asm.evaluate(&rates, self.x, &self.penalties)?;

        for (l, &sat) in ev.saturated.iter().enumerate() {
            if sat && !self.saturated[l] {
                self.trace.events.push(SimEvent {
                    t,
                    kind: EventKind::Saturation,
                    link: Some(asm.spec.links()[l].id),
                    detail: format!("delay capped at {}", asm.sim.ceiling),
                });
            }
            self.saturated[l] = sat;
        }

        let mut triggered = false;
        for (l, model) in asm.models.iter().enumerate() {
            if let LinkModel::Oob(OobWormholeLaw { profile: DropProfile::Threshold { threshold, .. }, .. }) = model {
                triggered |= ev.loads[l] > *threshold;
            }
        }
        if triggered != self.triggered {
            self.trace.events.push(SimEvent {
                t,
                kind: if triggered { EventKind::AdversaryTriggered } else { EventKind::AdversaryReleased },
                link: None,
                detail: String::new(),
            });
            self.triggered = triggered;
        }

        let n = asm.spec.links().len();
        let mut detect = vec![false; n];
        self.next_penalties = vec![0.0; n];
        if let Some(det) = &mut self.detector {
            for (l, stream) in &mut self.detector_rngs {
                let l = *l;
                let id = asm.spec.links()[l].id;
                let truth = ev.base[l] + ev.leash[l];
                let expected = asm.expected_delay(l, ev.link_rates[l]);
                let observed = sample_observed_delay(truth, stream)?;
                detect[l] = det.observe(id, observed.max(f64::MIN_POSITIVE), expected)?;
                if detect[l] {
                    self.next_penalties[l] = det.penalty;
                }
            }
        }

        self.last_q = Some(PathDelays::from_stacked(&asm.spec, &ev.routing));
        let mitigation = (0..n).map(|l| ev.leash[l] + ev.penalty[l]).collect();
        self.trace.rows.push(TraceRow {
            t,
            rates,
            delays: ev.routing,
            experienced: ev.experienced,
            link_rates: ev.link_rates,
            link_delays: ev.base,
            mitigation,
            drop: ev.drop,
            detect,
            x_compromise: self.x.unwrap_or(0.0),
            adversary_triggered: triggered,
            plant: None,
        });
        Ok(self.trace.rows.last_mut().unwrap())
    }

    /// Advances flow and compromise state by one step using the delays of
    /// the last recorded row.
    pub fn advance(&mut self) -> Result<()> {
        let q = self
            .last_q
            .take()
            .ok_or_else(|| Error::input("advance called before record"))?;
        self.state = wardrop_step(&self.state, &q, self.dt)?;
        self.steps += 1;
        self.state.t = self.t0 + self.steps as f64 * self.dt;
        if let (Some(c), Some((curve, _))) = (&self.compromise, self.asm.beta_curve()) {
            let slope = beta_derivative(curve, c.x)?;
            let next = compromise_step(c, slope, self.dt)?;
            self.x = Some(next.x);
            self.compromise = Some(next);
        }
        self.penalties = std::mem::take(&mut self.next_penalties);
        Ok(())
    }

    pub fn last_row_mut(&mut self) -> &mut TraceRow {
        self.trace.rows.last_mut().expect("record called before last_row_mut")
    }

    pub fn push_event(&mut self, event: SimEvent) {
        self.trace.events.push(event);
    }

    pub fn finish(self) -> SimTrace {
        self.trace
    }
}

/// Number of Euler steps covering `horizon`.
pub fn step_count(horizon: f64, dt: f64) -> usize {
    (horizon / dt + 1e-9).floor() as usize
}

/// Runs the interconnection for `horizon` time units. The trace holds the
/// initial row plus one row per step.
pub fn simulate(asm: &SystemAssembly, horizon: f64, dt: f64) -> Result<SimTrace> {
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(Error::input(format!("horizon must be nonnegative, got {horizon}")));
    }
    let mut sim = Simulator::new(asm, dt)?;
    let steps = step_count(horizon, dt);
    for k in 0..=steps {
        sim.record()?;
        if k < steps {
            sim.advance()?;
        }
    }
    Ok(sim.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ScenarioConfig;

    const TWO_PATHS: &str = r#"
[network]
nodes = ["s", "m", "t"]

[[network.links]]
id = 1
from = "s"
to = "t"
kind = "valid"
capacity = 2.0
propagation_delay = 1.0

[[network.links]]
id = 2
from = "s"
to = "m"
kind = "valid"
capacity = 2.0
propagation_delay = 0.5

[[network.links]]
id = 3
from = "m"
to = "t"
kind = "out_of_band_placeholder"
"#;

    fn two_paths() -> ScenarioConfig {
        let text = TWO_PATHS.replace(
            "kind = \"out_of_band_placeholder\"",
            "kind = \"valid\"\ncapacity = 2.0\npropagation_delay = 0.5",
        ) + r#"
[[sources]]
id = 1
origin = "s"
destination = "t"
rate = 3.0
paths = [[1], [2, 3]]
initial = [3.0, 0.0]

[sim]
dt = 0.01
horizon = 60.0
"#;
        ScenarioConfig::from_toml_str(&text).unwrap()
    }

    #[test]
    fn zero_horizon_gives_initial_row_only() {
        let asm = assemble(&two_paths()).unwrap();
        let trace = simulate(&asm, 0.0, 0.01).unwrap();
        assert_eq!(trace.rows.len(), 1);
        assert_eq!(trace.rows[0].rates, vec![3.0, 0.0]);
    }

    #[test]
    fn all_valid_network_converges_to_oracle() {
        let asm = assemble(&two_paths()).unwrap();
        let trace = simulate(&asm, 60.0, 0.01).unwrap();
        assert!(converged(&trace, 100, 1e-6));
        let sol = asm.oracle(None, OracleOptions::default()).unwrap();
        let last = &trace.last().rates;
        assert!((last[0] - sol.rates[0][0]).abs() < 1e-3, "{last:?} vs {:?}", sol.rates);
    }

    #[test]
    fn disabled_mitigation_adds_nothing() {
        let asm = assemble(&two_paths()).unwrap();
        let ev = asm.evaluate(&[1.0, 2.0], None, &[]).unwrap();
        assert!(ev.leash.iter().all(|v| *v == 0.0));
        assert_eq!(ev.routing, ev.experienced);
    }

    #[test]
    fn leash_on_in_band_link_is_rejected() {
        let mut cfg = two_paths();
        cfg.network.links[2].kind = LinkKind::IbWormhole;
        cfg.mitigation.leash = Some(crate::config::LeashSection {
            skew_mean: 1.0,
            policy: LeashMode::Adaptive,
            alpha_ref: None,
            delta_max: None,
            links: Some(vec![3]),
        });
        assert!(matches!(assemble(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn convergence_predicate() {
        let asm = assemble(&two_paths()).unwrap();
        let mut trace = simulate(&asm, 0.05, 0.01).unwrap();
        let flat = trace.rows[0].clone();
        for row in &mut trace.rows {
            row.rates = flat.rates.clone();
        }
        assert!(converged(&trace, 3, 1e-9));
        for (k, row) in trace.rows.iter_mut().enumerate() {
            row.rates[0] = k as f64;
        }
        assert!(!converged(&trace, 3, 1e-9));
    }
}
