//! Order-preserving parallel map over replication indices.

use rayon::prelude::*;

use crate::error::{invalid, Result};

/// Run `job(rep)` for `rep in 0..n` on `workers` threads and return the
/// results indexed by replication id.
pub fn map_replications<T, F>(n: usize, workers: usize, job: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    if workers == 0 {
        return Err(invalid("workers", "must be >= 1"));
    }
    if workers == 1 {
        return Ok((0..n as u64).map(&job).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| invalid("workers", e.to_string()))?;
    Ok(pool.install(|| (0..n as u64).into_par_iter().map(&job).collect()))
}
