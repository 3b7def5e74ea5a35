//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the helpers dispatch to rayon; without it they
//! are plain loops. Work items never share output memory and every reduction
//! inside a work item runs in a fixed order, so both paths produce the same
//! bits. [`set_sequential`] forces the plain path at runtime, which is what the
//! benches use to compare the two.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Below this many scalar operations a call is not worth splitting.
#[cfg(feature = "parallel")]
const MIN_PARALLEL_WORK: usize = 1 << 14;

/// Force every helper onto the sequential path (process-wide).
pub fn set_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::SeqCst);
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::Relaxed)
}

#[cfg(feature = "parallel")]
#[inline]
fn go_parallel(work: usize) -> bool {
    work >= MIN_PARALLEL_WORK && is_parallel()
}

/// Run `f(index, chunk)` over consecutive `chunk`-sized pieces of `data`.
///
/// `work` is a rough count of scalar operations for the whole call.
pub fn chunks_mut<T, F>(data: &mut [T], chunk: usize, work: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk == 0 || data.is_empty() {
        return;
    }
    #[cfg(feature = "parallel")]
    if go_parallel(work) {
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = work;
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Collect `f(i)` for `i in 0..n`, in index order.
pub fn map<R, F>(n: usize, work: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if go_parallel(work) {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = work;
    (0..n).map(f).collect()
}

/// Like [`map`] but always parallel when enabled, for coarse independent jobs
/// (trials, folds, seeds) whose cost is not known up front.
pub fn map_coarse<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}
