//! Data-parallel execution with a sequential fallback.
//!
//! With the `parallel` feature (default) work fans out over a rayon pool; the
//! same calls run in order on the current thread when the feature is off or a
//! single worker is requested. Results are always returned in input order, and
//! every task derives its randomness from its own index, so the two paths give
//! identical output.

use std::num::NonZeroUsize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parallelism {
    Sequential,
    /// Up to `n` worker threads.
    Workers(NonZeroUsize),
    /// The global rayon pool.
    Auto,
}

impl Parallelism {
    pub fn from_workers(workers: Option<usize>) -> Self {
        match workers {
            Some(0) | None => Parallelism::Auto,
            Some(1) => Parallelism::Sequential,
            Some(n) => Parallelism::Workers(NonZeroUsize::new(n).unwrap()),
        }
    }
}

impl Default for Parallelism {
    fn default() -> Self {
        Parallelism::Auto
    }
}

/// `(0..n).map(f)` collected in order, possibly in parallel.
pub fn map_indexed<T, F>(n: usize, par: Parallelism, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        match par {
            Parallelism::Sequential => (0..n).map(f).collect(),
            Parallelism::Auto => (0..n).into_par_iter().map(f).collect(),
            Parallelism::Workers(w) => match rayon::ThreadPoolBuilder::new()
                .num_threads(w.get())
                .build()
            {
                Ok(pool) => pool.install(|| (0..n).into_par_iter().map(&f).collect()),
                Err(_) => (0..n).map(f).collect(),
            },
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = par;
        (0..n).map(f).collect()
    }
}

/// Maps over a slice, keeping order.
pub fn map_slice<I, T, F>(items: &[I], par: Parallelism, f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> T + Sync + Send,
{
    map_indexed(items.len(), par, |k| f(&items[k]))
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paths_agree() {
        let f = |k: usize| (k as f64).sqrt() * 3.0;
        let a = map_indexed(1000, Parallelism::Sequential, f);
        let b = map_indexed(1000, Parallelism::Auto, f);
        let c = map_indexed(1000, Parallelism::from_workers(Some(3)), f);
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn worker_knob() {
        assert_eq!(Parallelism::from_workers(Some(1)), Parallelism::Sequential);
        assert_eq!(Parallelism::from_workers(None), Parallelism::Auto);
    }
}
