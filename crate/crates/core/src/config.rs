//! TOML scenario files.
//!
//! Unknown keys are rejected. Units: rates and capacities in flow units,
//! delays, slack, skew and periods in time units.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::{LinkId, LinkKind, LinkSpec, NetworkSpec, SourceSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub network: NetworkSection,
    pub sources: Vec<SourceSection>,
    #[serde(default)]
    pub adversary: AdversarySection,
    #[serde(default)]
    pub mitigation: MitigationSection,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub plant: Option<PlantSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    /// Per-hop delay used by the adversary's margin estimate.
    #[serde(default = "one")]
    pub per_hop_delay: f64,
    pub nodes: Vec<String>,
    pub links: Vec<LinkSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSection {
    pub id: u32,
    pub from: String,
    pub to: String,
    pub kind: LinkKind,
    #[serde(default)]
    pub capacity: Option<f64>,
    #[serde(default)]
    pub propagation_delay: Option<f64>,
    #[serde(default)]
    pub queue_capacity: Option<u32>,
    /// Leash slack; defaults to 1 on wormholes and 0 elsewhere.
    #[serde(default)]
    pub slack: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSection {
    pub id: u32,
    pub origin: String,
    pub destination: String,
    pub rate: f64,
    pub paths: Vec<Vec<u32>>,
    /// Initial per-path allocation; an even split when omitted.
    #[serde(default)]
    pub initial: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversarySection {
    #[serde(default)]
    pub oob: Option<OobSection>,
    #[serde(default)]
    pub ib: Option<IbSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    None,
    Inverse,
    Constant,
    Threshold,
    Optimal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OobSection {
    pub link: u32,
    pub profile: ProfileKind,
    /// Drop fraction for `constant`, or the triggered fraction for `threshold`.
    #[serde(default)]
    pub phi: Option<f64>,
    /// Flow above which the `threshold` adversary starts dropping.
    #[serde(default)]
    pub threshold: Option<f64>,
    /// Tunnel endpoints for the `optimal` plan.
    #[serde(default)]
    pub entry: Option<String>,
    #[serde(default)]
    pub exit: Option<String>,
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub utility_slope: Option<f64>,
    #[serde(default)]
    pub utility_intercept: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IbMode {
    Beta,
    Reroute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IbSection {
    pub link: u32,
    pub mode: IbMode,
    #[serde(default)]
    pub entry: Option<String>,
    #[serde(default)]
    pub exit: Option<String>,
    /// Per-unit cost of compromising nodes.
    #[serde(default)]
    pub cost: Option<f64>,
    #[serde(default)]
    pub x0: Option<f64>,
    #[serde(default)]
    pub grid: Option<Vec<f64>>,
    #[serde(default)]
    pub trials: Option<usize>,
    /// Tunnel length when no collapse-safe relay is captured.
    #[serde(default)]
    pub fallback: Option<f64>,
    /// Share of tunnel traffic carried on `route_a`.
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub route_a: Option<Vec<u32>>,
    #[serde(default)]
    pub route_b: Option<Vec<u32>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MitigationSection {
    #[serde(default)]
    pub leash: Option<LeashSection>,
    #[serde(default)]
    pub detector: Option<DetectorSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeashMode {
    Adaptive,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeashSection {
    pub skew_mean: f64,
    pub policy: LeashMode,
    #[serde(default)]
    pub alpha_ref: Option<f64>,
    #[serde(default)]
    pub delta_max: Option<f64>,
    /// Protected links; every valid and out-of-band link when omitted.
    #[serde(default)]
    pub links: Option<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSection {
    /// Monitored links; every valid and in-band link when omitted.
    #[serde(default)]
    pub links: Option<Vec<u32>>,
    #[serde(default = "ten")]
    pub penalty: f64,
    #[serde(default = "half")]
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "one_u64")]
    pub seed: u64,
    /// Trailing rows inspected by the convergence check.
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Cap on any single delay when a law saturates.
    #[serde(default = "default_ceiling")]
    pub ceiling: f64,
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection {
            dt: default_dt(),
            horizon: default_horizon(),
            seed: 1,
            window: default_window(),
            tol: default_tol(),
            ceiling: default_ceiling(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSection {
    #[serde(default = "default_period")]
    pub period: f64,
    #[serde(default = "two")]
    pub gain: f64,
    #[serde(default = "one")]
    pub noise_std: f64,
    #[serde(default = "one")]
    pub x0: f64,
    /// Source whose paths carry the sensor packets.
    #[serde(default = "one_u32")]
    pub source: u32,
    /// Sensor-packet drop probability once the adversary is triggered.
    #[serde(default = "default_trigger_drop")]
    pub drop_probability: f64,
}

fn one() -> f64 {
    1.0
}
fn two() -> f64 {
    2.0
}
fn half() -> f64 {
    0.5
}
fn ten() -> f64 {
    10.0
}
fn one_u64() -> u64 {
    1
}
fn one_u32() -> u32 {
    1
}
fn default_dt() -> f64 {
    0.01
}
fn default_horizon() -> f64 {
    100.0
}
fn default_window() -> usize {
    500
}
fn default_tol() -> f64 {
    1e-6
}
fn default_ceiling() -> f64 {
    1e3
}
fn default_period() -> f64 {
    0.3
}
fn default_trigger_drop() -> f64 {
    0.9
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    fn check(&self) -> Result<()> {
        let s = &self.sim;
        if !(s.dt > 0.0 && s.dt.is_finite()) {
            return Err(Error::config(format!("sim.dt must be positive, got {}", s.dt)));
        }
        if !(s.horizon >= 0.0 && s.horizon.is_finite()) {
            return Err(Error::config(format!("sim.horizon must be nonnegative, got {}", s.horizon)));
        }
        if !(s.ceiling > 0.0) {
            return Err(Error::config("sim.ceiling must be positive"));
        }
        if s.window == 0 {
            return Err(Error::config("sim.window must be at least 1"));
        }
        if let Some(p) = &self.plant {
            if !(p.period > 0.0) || !(p.gain > 0.0) {
                return Err(Error::config("plant.period and plant.gain must be positive"));
            }
            if !(p.noise_std >= 0.0) {
                return Err(Error::config("plant.noise_std must be nonnegative"));
            }
            if !(0.0..=1.0).contains(&p.drop_probability) {
                return Err(Error::config("plant.drop_probability must lie in [0, 1]"));
            }
            let ratio = p.period / s.dt;
            if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) {
                return Err(Error::config("plant.period must be a whole multiple of sim.dt"));
            }
        }
        Ok(())
    }

    /// Builds the validated topology.
    pub fn network_spec(&self) -> Result<NetworkSpec> {
        let links = self
            .network
            .links
            .iter()
            .map(|l| {
                let need = |v: Option<f64>, what: &str| {
                    v.ok_or_else(|| Error::config(format!("link {}: missing {what}", l.id)))
                };
                let (capacity, propagation_delay, queue_capacity) = if l.kind == LinkKind::Access {
                    (l.capacity.unwrap_or(0.0), l.propagation_delay.unwrap_or(0.0), l.queue_capacity.unwrap_or(0))
                } else {
                    (
                        need(l.capacity, "capacity")?,
                        need(l.propagation_delay, "propagation_delay")?,
                        l.queue_capacity.unwrap_or(5),
                    )
                };
                let slack = l.slack.unwrap_or(if l.kind.is_wormhole() { 1.0 } else { 0.0 });
                Ok(LinkSpec {
                    id: LinkId(l.id),
                    from: l.from.clone(),
                    to: l.to.clone(),
                    kind: l.kind,
                    capacity,
                    propagation_delay,
                    queue_capacity,
                    slack,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let sources = self
            .sources
            .iter()
            .map(|s| SourceSpec {
                id: s.id,
                origin: s.origin.clone(),
                destination: s.destination.clone(),
                rate: s.rate,
                paths: s.paths.iter().map(|p| p.iter().map(|&l| LinkId(l)).collect()).collect(),
            })
            .collect();
        NetworkSpec::new(self.network.nodes.clone(), links, sources, self.network.per_hop_delay).map_err(|e| match e {
            Error::Input(msg) => Error::config(msg),
            other => other,
        })
    }

    /// Copy of the scenario with one link and every path through it removed.
    pub fn without_link(&self, id: u32) -> Result<ScenarioConfig> {
        let mut cfg = self.clone();
        if !cfg.network.links.iter().any(|l| l.id == id) {
            return Err(Error::config(format!("unknown link {id}")));
        }
        cfg.network.links.retain(|l| l.id != id);
        for src in &mut cfg.sources {
            let keep: Vec<bool> = src.paths.iter().map(|p| !p.contains(&id)).collect();
            if !keep.iter().any(|k| *k) {
                return Err(Error::config(format!("source {} only has paths through link {id}", src.id)));
            }
            src.paths = src.paths.iter().zip(&keep).filter(|(_, k)| **k).map(|(p, _)| p.clone()).collect();
            if let Some(init) = &src.initial {
                let kept: Vec<f64> = init.iter().zip(&keep).filter(|(_, k)| **k).map(|(v, _)| *v).collect();
                let sum: f64 = kept.iter().sum();
                src.initial = if sum > 0.0 {
                    Some(kept.iter().map(|v| v * src.rate / sum).collect())
                } else {
                    None
                };
            }
        }
        if cfg.adversary.oob.as_ref().is_some_and(|o| o.link == id) {
            cfg.adversary.oob = None;
        }
        if cfg.adversary.ib.as_ref().is_some_and(|o| o.link == id) {
            cfg.adversary.ib = None;
        }
        if let Some(l) = &mut cfg.mitigation.leash {
            if let Some(links) = &mut l.links {
                links.retain(|x| *x != id);
            }
        }
        if let Some(d) = &mut cfg.mitigation.detector {
            if let Some(links) = &mut d.links {
                links.retain(|x| *x != id);
            }
        }
        Ok(cfg)
    }
}
