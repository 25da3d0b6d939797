//! Parallel Monte Carlo coalescence driver.
//!
//! Trajectories are split into fixed chunks of [`CHUNK`] and each chunk
//! draws from its own per-trajectory streams, so the summed counts do not
//! depend on the worker count or scheduling.

use rayon::prelude::*;

use qcoupling_core::coupling::{check_mc_args, report_from_counts, tail_counts, CoalescenceReport, RandomMapping};

use crate::error::{CliError, Result};

/// Trajectories per work item.
pub const CHUNK: u64 = 4096;

/// Same report as `coalescence_tail_mc`, computed on `workers` threads.
pub fn coalescence_tail_mc_parallel(
    rmr: &dyn RandomMapping,
    start_pairs: &[(usize, usize)],
    m_grid: &[usize],
    samples: u64,
    seed: u64,
    workers: usize,
) -> Result<CoalescenceReport> {
    check_mc_args(rmr, start_pairs, m_grid, samples)?;
    if workers == 0 {
        return Err(CliError::Usage("workers must be at least 1".into()));
    }
    let items: Vec<(usize, u64)> = (0..start_pairs.len()).flat_map(|slot| (0..samples.div_ceil(CHUNK)).map(move |c| (slot, c))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    let partial: Vec<(usize, Vec<u64>)> = pool.install(|| {
        items
            .par_iter()
            .map(|&(slot, c)| {
                let range = c * CHUNK..((c + 1) * CHUNK).min(samples);
                (slot, tail_counts(rmr, start_pairs[slot], slot, m_grid, seed, range))
            })
            .collect()
    });
    let mut counts = vec![vec![0u64; m_grid.len()]; start_pairs.len()];
    for (slot, c) in partial {
        for (acc, v) in counts[slot].iter_mut().zip(c) {
            *acc += v;
        }
    }
    Ok(report_from_counts(rmr.num_states(), start_pairs, m_grid, &counts, samples, seed))
}
