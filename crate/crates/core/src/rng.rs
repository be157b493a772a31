//! Seed-derived random streams.
//!
//! Every consumer of randomness owns a ChaCha8 stream keyed by the run seed
//! and a fixed stream id, so results do not depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DETECTOR_BASE: u64 = 1 << 32;
pub const BETA_BASE: u64 = 2 << 32;
pub const PLANT_DISTURBANCE: u64 = 3 << 32;
pub const PLANT_DELAY: u64 = (3 << 32) + 1;
pub const PLANT_DROP: u64 = (3 << 32) + 2;
pub const INITIAL_STATE: u64 = 4 << 32;

pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}
