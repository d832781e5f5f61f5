//! Deterministic random streams.
//!
//! Every replication draws from a ChaCha8 generator keyed by the master seed
//! with the replication index as its stream id, so the numbers a replication
//! sees do not depend on scheduling or on how many workers run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream reserved for bootstrap resampling.
pub const BOOTSTRAP_STREAM: u64 = u64::MAX;
/// Stream reserved for Gaussian path sampling outside replications.
pub const GAUSSIAN_STREAM: u64 = u64::MAX - 1;

pub fn replication_rng(master_seed: u64, rep: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(rep);
    rng
}
