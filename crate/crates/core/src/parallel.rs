//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature enabled, work over independent items (batch
//! images, calibration images, per-layer sweeps) is spread over the rayon
//! pool. Results are always collected in input order and every reduction
//! happens afterwards on the calling thread, so outputs are bit-identical
//! whether or not the pool is used.

use std::sync::atomic::{AtomicBool, Ordering};

static ENABLED: AtomicBool = AtomicBool::new(true);

/// Toggle the parallel path at runtime. Has no effect without the `parallel`
/// feature.
pub fn set_enabled(enabled: bool) {
    ENABLED.store(enabled, Ordering::Relaxed);
}

pub fn is_enabled() -> bool {
    cfg!(feature = "parallel") && ENABLED.load(Ordering::Relaxed)
}

/// Map `f` over `0..n`, returning results in index order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if n > 1 && is_enabled() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Map `f` over a slice, returning results in slice order.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    map_range(items.len(), |i| f(&items[i]))
}
