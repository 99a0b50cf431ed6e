//! Parallel execution helpers.
//!
//! All kernels are written gather-style: every output element is produced by
//! exactly one task with a sequential inner reduction, so results are bitwise
//! identical whether a loop runs on one thread or many. The `parallel` feature
//! compiles the rayon paths in; [`set_parallel`] flips between them at runtime
//! (used by the benches to compare both on the same build).

#[cfg(feature = "parallel")]
use rayon::prelude::*;
#[cfg(feature = "parallel")]
use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Below this many scalar operations the spawn overhead dominates.
const PARALLEL_GRAIN: usize = 16_384;

/// Enable or disable the rayon paths at runtime. No-op when the crate was
/// built without the `parallel` feature.
pub fn set_parallel(enabled: bool) {
    #[cfg(feature = "parallel")]
    PARALLEL.store(enabled, Ordering::SeqCst);
    #[cfg(not(feature = "parallel"))]
    let _ = enabled;
}

/// True when rayon paths are compiled in and currently enabled.
pub fn parallel_enabled() -> bool {
    #[cfg(feature = "parallel")]
    {
        PARALLEL.load(Ordering::SeqCst)
    }
    #[cfg(not(feature = "parallel"))]
    {
        false
    }
}

/// Fill `out` in fixed-size chunks, calling `fill(chunk_index, chunk)` for each.
/// `work` is the estimated scalar-op count used to decide whether to go parallel.
pub fn fill_chunks<T, F>(out: &mut [T], chunk: usize, work: usize, fill: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    debug_assert!(chunk > 0 && out.len() % chunk == 0);
    #[cfg(feature = "parallel")]
    if parallel_enabled() && work >= PARALLEL_GRAIN && out.len() > chunk {
        out.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| fill(i, c));
        return;
    }
    let _ = work;
    for (i, c) in out.chunks_mut(chunk).enumerate() {
        fill(i, c);
    }
}

/// Order-preserving map over owned items; parallel when enabled. The output
/// order equals the input order regardless of scheduling, which keeps
/// downstream reductions deterministic.
pub fn map_ordered<I, O, F>(items: Vec<I>, f: F) -> Vec<O>
where
    I: Send,
    O: Send,
    F: Fn(I) -> O + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        return items.into_par_iter().map(f).collect();
    }
    items.into_iter().map(f).collect()
}
