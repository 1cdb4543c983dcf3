//! Process-wide switch for data-parallel kernels.
//!
//! Kernels split work per batch sample and always reduce partial results
//! in sample order, so the parallel path is bit-identical to the serial one.

use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;

static THREADS: AtomicUsize = AtomicUsize::new(0);

/// Environment variable capping internal parallelism; `0` is serial.
pub const THREADS_ENV: &str = "RDUNET_THREADS";

/// Sets the worker count used by kernels. `0` selects the serial path.
///
/// The first call with a non-zero count sizes rayon's global pool; later
/// calls can only lower the effective count.
pub fn set_threads(n: usize) {
    if n > 0 {
        // Already-initialized pools are fine; keep whatever exists.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    THREADS.store(n, Ordering::Relaxed);
}

/// Reads [`THREADS_ENV`] and applies it. Unset or unparsable means serial.
pub fn init_from_env() -> usize {
    let n = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0);
    set_threads(n);
    n
}

pub fn threads() -> usize {
    THREADS.load(Ordering::Relaxed)
}

/// Maps `f` over `0..n`, in parallel when enabled; output order is index order.
pub(crate) fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    if threads() > 1 && n > 1 {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

/// Runs `f` on each `chunk`-sized piece of `data`, in parallel when enabled.
pub(crate) fn for_each_chunk<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    if threads() > 1 && data.len() > chunk {
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    } else {
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}
