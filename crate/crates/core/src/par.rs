//! Execution policy for the data-parallel loops.
//!
//! With the `parallel` feature (default) row bands and lattice slices are
//! spread over a rayon pool; without it every loop runs on the calling
//! thread. Results never depend on the policy: each output element is
//! written by exactly one task and reductions happen in a fixed order.

use crate::error::Result;

/// Environment variable that caps the worker count.
pub const THREADS_ENV: &str = "AUTOLUT_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    /// Global rayon pool.
    #[default]
    Parallel,
    /// Dedicated pool with this many workers.
    Threads(usize),
}

impl Exec {
    /// Policy derived from `AUTOLUT_THREADS`, falling back to the global pool.
    pub fn from_env() -> Self {
        match std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
            Some(0) | None => Exec::Parallel,
            Some(1) => Exec::Sequential,
            Some(n) => Exec::Threads(n),
        }
    }

    pub fn is_sequential(self) -> bool {
        !cfg!(feature = "parallel") || matches!(self, Exec::Sequential | Exec::Threads(1))
    }

    /// Runs `f` under this policy. Inside `f`, the helpers below pick up the
    /// dedicated pool if one was requested.
    pub fn install<R: Send>(self, f: impl FnOnce() -> R + Send) -> Result<R> {
        #[cfg(feature = "parallel")]
        if let Exec::Threads(n) = self {
            if n > 1 {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| crate::error::Error::Internal(e.to_string()))?;
                return Ok(pool.install(f));
            }
        }
        Ok(f())
    }

    /// Fills `out` in chunks of `chunk` elements; `f(chunk_index, chunk)`.
    pub fn for_each_chunk<T, F>(self, out: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Send + Sync,
    {
        let chunk = chunk.max(1);
        #[cfg(feature = "parallel")]
        if !self.is_sequential() {
            use rayon::prelude::*;
            out.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
        out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }

    /// Maps `0..n` to a vector, preserving index order.
    pub fn map_range<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Send + Sync,
    {
        #[cfg(feature = "parallel")]
        if !self.is_sequential() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }
}
