//! Order-preserving data-parallel helpers.
//!
//! Every fan-out in the crate goes through [`Exec::map_range`] or [`Exec::map`]:
//! results come back in input order and all reductions happen sequentially
//! afterwards, so outputs are bit-identical for any worker count. Without the
//! `parallel` feature both variants run sequentially.

use std::sync::Once;

/// Environment variable capping the worker pool size.
pub const WORKERS_ENV: &str = "CFBENCH_WORKERS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// `Parallel` when compiled with rayon, otherwise `Sequential`.
    pub fn auto() -> Exec {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }

    pub fn map<T, U, F>(self, items: &[T], f: F) -> Vec<U>
    where
        T: Sync,
        U: Send,
        F: Fn(&T) -> U + Sync + Send,
    {
        self.map_range(items.len(), |i| f(&items[i]))
    }

    pub fn map_range<U, F>(self, n: usize, f: F) -> Vec<U>
    where
        U: Send,
        F: Fn(usize) -> U + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel if n > 1 => {
                use rayon::prelude::*;
                init_pool();
                (0..n).into_par_iter().map(f).collect()
            }
            _ => (0..n).map(f).collect(),
        }
    }
}

static POOL: Once = Once::new();

/// Installs the global rayon pool, honouring [`WORKERS_ENV`]. Idempotent.
pub fn init_pool() {
    POOL.call_once(|| {
        #[cfg(feature = "parallel")]
        if let Some(n) = worker_cap() {
            // Fails only if someone else already built the global pool.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    });
}

/// Parsed value of [`WORKERS_ENV`], ignoring zero and garbage.
pub fn worker_cap() -> Option<usize> {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}
