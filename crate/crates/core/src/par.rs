//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) independent work items fan out over
//! the rayon pool. Results are always collected in index order and every
//! reduction over them happens sequentially afterwards, so outputs are
//! bitwise identical for any thread count. [`set_policy`] switches to the
//! sequential path at runtime, which the benches use for comparison.

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    Sequential,
    Parallel,
}

/// Selects the execution policy. Without the `parallel` feature this is a no-op.
pub fn set_policy(policy: Policy) {
    FORCE_SEQUENTIAL.store(policy == Policy::Sequential, Ordering::Relaxed);
}

pub fn policy() -> Policy {
    if cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::Relaxed) {
        Policy::Parallel
    } else {
        Policy::Sequential
    }
}

/// `(0..n).map(f).collect()`, in parallel when enabled.
pub fn map<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if policy() == Policy::Parallel && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Like [`map`] but over fallible work items; the first error in index order wins.
pub fn try_map<R, E, F>(n: usize, f: F) -> Result<Vec<R>, E>
where
    R: Send,
    E: Send,
    F: Fn(usize) -> Result<R, E> + Sync + Send,
{
    map(n, f).into_iter().collect()
}

/// Applies `f` to consecutive chunks of `data` in parallel.
pub fn for_each_chunk<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if policy() == Policy::Parallel {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}
