//! Sampled scalar plant closed over the simulated network.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::composition::{step_count, EventKind, PlantSample, SimEvent, Simulator, SystemAssembly, TraceRow};
use crate::error::{Error, Result};
use crate::rng;
use crate::topology::{LinkId, LinkKind};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantConfig {
    /// Sampling period `h`.
    pub period: f64,
    /// Feedback gain `G` in `u = -G x`.
    pub gain: f64,
    pub noise_std: f64,
    pub x0: f64,
    /// Index of the source carrying the control traffic.
    pub source: usize,
}

/// Threshold attack on control traffic crossing an out-of-band tunnel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdversaryPolicy {
    pub link: LinkId,
    pub low_latency_delay: f64,
    /// Drops start once the tunnel carries more than this flow.
    pub flow_threshold: f64,
    pub drop_probability: f64,
}

impl AdversaryPolicy {
    pub fn disabled() -> Self {
        AdversaryPolicy { link: LinkId(u32::MAX), low_latency_delay: 0.0, flow_threshold: f64::INFINITY, drop_probability: 0.0 }
    }
}

/// One period of `x' = u + w` with `u` held: `x + h u + sqrt(h) w`, where
/// `w` is the already-scaled disturbance sample.
pub fn plant_step(x: f64, u_held: f64, disturbance: f64, h: f64) -> Result<f64> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::input(format!("period must be positive, got {h}")));
    }
    Ok(x + h * u_held + h.sqrt() * disturbance)
}

/// Picks a path for one control packet in proportion to the source's path
/// rates and returns its delay and whether the adversary drops it.
pub fn sample_network_delay<R1: Rng + ?Sized, R2: Rng + ?Sized>(
    asm: &SystemAssembly,
    row: &TraceRow,
    source: usize,
    policy: &AdversaryPolicy,
    delay_rng: &mut R1,
    drop_rng: &mut R2,
) -> Result<(f64, bool)> {
    let range = asm.spec.path_range(source);
    let total: f64 = row.rates[range.clone()].iter().sum();
    if !(total > 0.0) {
        return Err(Error::input("control source carries no flow"));
    }
    let mut pick = delay_rng.random::<f64>() * total;
    let mut path = range.end - 1;
    for p in range.clone() {
        if pick < row.rates[p] {
            path = p;
            break;
        }
        pick -= row.rates[p];
    }
    let tau = row.delays[path];
    let coin = drop_rng.random::<f64>();
    let crosses = asm.spec.link_position(policy.link).is_some_and(|l| {
        asm.incidence.get(l, path) == 1 && asm.spec.links()[l].kind == LinkKind::OobWormhole
    });
    let flow = asm
        .spec
        .link_position(policy.link)
        .map(|l| row.link_rates[l])
        .unwrap_or(0.0);
    Ok((tau, crosses && flow > policy.flow_threshold && coin < policy.drop_probability))
}

/// Runs network and plant together. The plant state, held control, latest
/// packet delay and drop flag are attached to every trace row.
pub fn co_simulate(asm: &SystemAssembly, horizon: f64, dt: f64) -> Result<crate::composition::SimTrace> {
    let (plant, policy) = asm
        .plant
        .ok_or_else(|| Error::config("scenario has no [plant] section"))?;
    let per_sample = (plant.period / dt).round();
    if per_sample < 1.0 || ((per_sample * dt) - plant.period).abs() > 1e-9 * plant.period.max(1.0) {
        return Err(Error::config("plant period must be a whole number of network steps"));
    }
    let per_sample = per_sample as usize;
    let seed = asm.sim.seed;
    let mut noise = rng::stream(seed, rng::PLANT_DISTURBANCE);
    let mut delay_rng = rng::stream(seed, rng::PLANT_DELAY);
    let mut drop_rng = rng::stream(seed, rng::PLANT_DROP);

    let mut sim = Simulator::new(asm, dt)?;
    let steps = step_count(horizon, dt);
    let mut x = plant.x0;
    let mut u = 0.0;
    let mut applied: Option<usize> = None;
    // (arrival time, sample index, control)
    let mut pending: Vec<(f64, usize, f64)> = Vec::new();
    let (mut tau, mut dropped) = (0.0, false);

    for n in 0..=steps {
        let t = n as f64 * dt;
        let row = sim.record()?.clone();
        if n % per_sample == 0 {
            let k = n / per_sample;
            let (d, lost) = sample_network_delay(asm, &row, plant.source, &policy, &mut delay_rng, &mut drop_rng)?;
            tau = d;
            dropped = lost;
            if d >= plant.period {
                sim.push_event(SimEvent {
                    t,
                    kind: EventKind::TimingViolation,
                    link: None,
                    detail: format!("sample {k} delayed {d} >= period {}", plant.period),
                });
            }
            if !lost {
                pending.push((t + d, k, -plant.gain * x));
                pending.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            }
        }
        sim.last_row_mut().plant = Some(PlantSample { x, u, tau, dropped });
        if n == steps {
            break;
        }

        let end = t + dt;
        let mut now = t;
        while let Some(&(arrival, k, control)) = pending.first() {
            if arrival >= end {
                break;
            }
            let at = arrival.max(now);
            x += (at - now) * u;
            now = at;
            if applied.is_none_or(|a| k > a) {
                u = control;
                applied = Some(k);
            }
            pending.remove(0);
        }
        let w: f64 = StandardNormal.sample(&mut noise);
        x += (end - now) * u + plant.noise_std * dt.sqrt() * w;
        if !x.is_finite() {
            return Err(Error::numerical(format!("plant state diverged at t = {end}")));
        }
        sim.advance()?;
    }
    Ok(sim.finish())
}

/// Sample variance of the plant state over the last third of the run.
pub fn final_third_variance(trace: &crate::composition::SimTrace) -> Result<f64> {
    let xs: Vec<f64> = trace.rows.iter().filter_map(|r| r.plant.map(|p| p.x)).collect();
    if xs.len() < 6 {
        return Err(Error::input("trace carries too few plant samples"));
    }
    let tail = &xs[xs.len() - xs.len() / 3..];
    let mean = tail.iter().sum::<f64>() / tail.len() as f64;
    Ok(tail.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (tail.len() - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_examples() {
        assert!((plant_step(1.0, -2.0, 0.0, 0.3).unwrap() - 0.4).abs() < 1e-12);
        assert_eq!(plant_step(0.0, 0.0, 0.0, 0.3).unwrap(), 0.0);
        assert!(plant_step(1.0, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn one_period_of_held_control_matches_exact_step() {
        let (h, g) = (0.3, 2.0);
        let mut x: f64 = 1.0;
        for _ in 0..10 {
            x = plant_step(x, -g * x, 0.0, h).unwrap();
        }
        assert!((x - (1.0 - g * h).powi(10)).abs() < 1e-12);
    }
}
