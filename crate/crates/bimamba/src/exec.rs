//! Thread-pool executor for the core training loops.

use bimamba_core::exec::Executor;
use rayon::prelude::*;
use rayon::ThreadPool;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "BIMAMBA_THREADS";

/// Runs `map_indexed` on a dedicated rayon pool. Results come back in
/// index order, so reductions stay deterministic for any thread count.
pub struct RayonExecutor {
    pool: ThreadPool,
}

impl RayonExecutor {
    pub fn new(threads: usize) -> Self {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .expect("thread pool starts");
        Self { pool }
    }

    /// Uses `BIMAMBA_THREADS` when set to a positive integer, otherwise
    /// the available parallelism.
    pub fn from_env() -> Self {
        Self::new(threads_from_env())
    }

    /// Runs `f` inside the pool so nested rayon work is capped too.
    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        self.pool.install(f)
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }
}

pub fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

impl Executor for RayonExecutor {
    fn map_indexed<R: Send, F: Fn(usize) -> R + Sync>(&self, n: usize, f: F) -> Vec<R> {
        self.pool.install(|| (0..n).into_par_iter().map(&f).collect())
    }
}
