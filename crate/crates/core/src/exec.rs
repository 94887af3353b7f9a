//! Execution mode for the embarrassingly parallel loops (permutation
//! replicates, simulation trials).
//!
//! With the `parallel` feature the work is spread over the rayon pool.
//! Without it, or with [`ExecMode::Sequential`], the same closures run in
//! index order. Results are collected by index, so both modes produce the
//! same output.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    Sequential,
    #[default]
    Parallel,
}

impl ExecMode {
    /// True when this mode will actually fan out.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == ExecMode::Parallel
    }

    /// Maps `f` over `0..n` and returns results in index order.
    pub fn map_indices<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Runs `f` inside a pool of `workers` threads when parallel; `workers = 0`
    /// uses the global pool.
    pub fn install<R: Send>(self, workers: usize, f: impl FnOnce() -> R + Send) -> R {
        #[cfg(feature = "parallel")]
        if self.is_parallel() && workers > 0 {
            if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
                return pool.install(f);
            }
        }
        let _ = workers;
        f()
    }
}
