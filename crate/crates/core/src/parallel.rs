//! Optional data parallelism over lattice layers.
//!
//! All solver sweeps write results to pre-assigned per-node slots, so output
//! is bit-identical whether a layer is mapped sequentially or in parallel.
//! The switch is process-global; the CLI sets it from `--parallel`.

use rayon::prelude::*;
use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(false);

/// Layers narrower than this are always mapped sequentially.
const PAR_THRESHOLD: usize = 4096;

/// Enable or disable layer-parallel execution for the whole process.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

/// Current parallelism setting.
pub fn parallel_enabled() -> bool {
    PARALLEL.load(Ordering::Relaxed)
}

/// Map `f` over `0..width` into a fresh vector, in parallel when enabled.
/// Element order (and therefore every output bit) is independent of the mode.
pub fn map_layer<T, F>(width: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if parallel_enabled() && width >= PAR_THRESHOLD {
        (0..width).into_par_iter().map(f).collect()
    } else {
        (0..width).map(f).collect()
    }
}
