//! Seed derivation.
//!
//! Every random stream in a run is derived from one master seed and a
//! `(purpose, client, round)` triple. The derivation is:
//!
//! ```text
//! h = splitmix64(master)
//! for byte in purpose: h = splitmix64(h ^ byte)
//! h = splitmix64(h ^ client)
//! h = splitmix64(h ^ round)
//! ```
//!
//! and the resulting 64-bit value seeds a ChaCha8 generator. Streams for
//! different purposes never share state, so adding a consumer in one
//! subsystem cannot shift the draws seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, purpose: &str, client: u64, round: u64) -> u64 {
    let mut h = splitmix64(master);
    for b in purpose.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    h = splitmix64(h ^ client);
    splitmix64(h ^ round)
}

/// Named stream purposes used by the simulator.
pub mod purpose {
    pub const DATASET: &str = "dataset";
    pub const SPLIT: &str = "split";
    pub const PARTITION: &str = "partition";
    pub const MODEL_INIT: &str = "model-init";
    pub const CONDITIONS: &str = "conditions";
    pub const TRAIN: &str = "train";
    pub const WARMUP: &str = "warmup";
    pub const PCA: &str = "pca";
    pub const QNET_INIT: &str = "qnet-init";
    pub const SELECT: &str = "select";
    pub const REPLAY: &str = "replay";
}

pub fn stream(master: u64, purpose: &str, client: u64, round: u64) -> SimRng {
    SimRng::seed_from_u64(derive_seed(master, purpose, client, round))
}
