//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) independent output rows are spread
//! over the rayon pool once a call carries enough work. Without the feature,
//! or after `set_parallel(false)`, the same closures run in order on the
//! calling thread. Only disjoint outputs are ever written in parallel, so
//! results are bit-identical between the two modes.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static ENABLED: AtomicBool = AtomicBool::new(true);

/// Below this many scalar operations a call stays on the current thread.
#[cfg(feature = "parallel")]
const MIN_PARALLEL_WORK: usize = 1 << 15;

/// Runtime switch, mostly for benchmarks comparing both modes in one build.
pub fn set_parallel(on: bool) {
    ENABLED.store(on, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && ENABLED.load(Ordering::Relaxed)
}

/// Calls `f(row_index, row)` for every `row_len`-sized chunk of `out`.
pub fn for_each_row<T, F>(out: &mut [T], row_len: usize, work_per_row: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if row_len == 0 {
        return;
    }
    let rows = out.len() / row_len;
    #[cfg(feature = "parallel")]
    if parallel_enabled() && rows > 1 && rows.saturating_mul(work_per_row) >= MIN_PARALLEL_WORK {
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
        return;
    }
    let _ = (rows, work_per_row);
    for (i, row) in out.chunks_mut(row_len).enumerate() {
        f(i, row);
    }
}

/// Evaluates `f(0..n)` and collects the results in index order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() && n > 1 {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}
