//! Data-parallel helpers with a sequential fallback.
//!
//! Every helper splits work into disjoint output chunks and computes each
//! chunk in a fixed order, so results do not depend on the thread count or
//! on whether the `parallel` feature is compiled in. Reductions across
//! chunks are never performed in parallel.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static ENABLED: AtomicBool = AtomicBool::new(true);

/// Below this many output elements the sequential path is always used.
#[cfg(feature = "parallel")]
const MIN_PARALLEL_WORK: usize = 1 << 14;

/// Toggles the rayon path at runtime. Has no effect without the `parallel` feature.
pub fn set_enabled(enabled: bool) {
    ENABLED.store(enabled, Ordering::Relaxed);
}

/// Whether parallel kernels are both compiled in and enabled.
pub fn is_enabled() -> bool {
    cfg!(feature = "parallel") && ENABLED.load(Ordering::Relaxed)
}

/// Calls `f(row_index, row)` for every `row_len`-sized chunk of `out`.
///
/// `work_hint` is a rough per-call cost used to decide whether spawning is worthwhile.
pub fn for_each_row<F>(out: &mut [f64], row_len: usize, work_hint: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Send + Sync,
{
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if is_enabled() && work_hint >= MIN_PARALLEL_WORK && out.len() > row_len {
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
        return;
    }
    let _ = work_hint;
    out.chunks_mut(row_len)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}

/// Maps `f` over `items`, preserving order.
pub fn map_ordered<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if is_enabled() && items.len() > 1 {
        return items.par_iter().map(f).collect();
    }
    items.iter().map(f).collect()
}
