//! Fluid-flow simulation of multipath routing under wormhole attacks.
//!
//! Sources split a fixed rate over candidate paths and shift flow toward the
//! currently fastest path. Links follow queueing, tunnel or in-band delay
//! laws; packet leashes and statistical detection add mitigation terms on
//! top. Passivity audits and a convex-program oracle cross-check the runs,
//! and a sampled integrator plant can be closed over the network.

pub mod composition;
pub mod config;
pub mod error;
pub mod flow_dynamics;
pub mod ib_mitigation;
pub mod ib_wormhole;
pub mod link_models;
pub mod oob_mitigation;
pub mod passivity;
pub mod plant;
pub mod quad;
pub mod rng;
pub mod topology;
pub mod trace_io;

pub use error::{Error, Result};
