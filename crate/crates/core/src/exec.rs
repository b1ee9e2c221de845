//! Pluggable data parallelism for per-sample work.

use alloc::vec::Vec;

/// Runs `f(0..n)` and returns the results in index order.
///
/// Implementations may evaluate indices concurrently; callers rely only on
/// the output order, so results are identical for every executor.
pub trait Executor: Sync {
    fn map_indexed<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync;
}

/// Evaluates indices one after another on the calling thread.
#[derive(Clone, Copy, Debug, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map_indexed<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync,
    {
        (0..n).map(f).collect()
    }
}
