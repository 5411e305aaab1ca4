//! Indexed map over replications, parallel when the `parallel` feature is on.
//!
//! Output order always follows the index, so reductions done by the caller
//! are identical for any thread count.

/// Thread budget for a parallel section. `None` uses the rayon default.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Threads(pub Option<usize>);

impl Threads {
    pub fn sequential() -> Self {
        Threads(Some(1))
    }

    /// `RANKPEER_THREADS` when set to a positive integer, otherwise the default.
    pub fn from_env() -> Self {
        std::env::var("RANKPEER_THREADS")
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&t| t > 0)
            .map(|t| Threads(Some(t)))
            .unwrap_or_default()
    }
}

/// Evaluate `f(0..n)` and collect results in index order.
pub fn map_indexed<T, F>(n: usize, threads: Threads, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if threads.0 != Some(1) && n > 1 {
            return map_parallel(n, threads, f);
        }
    }
    let _ = threads;
    (0..n).map(f).collect()
}

#[cfg(feature = "parallel")]
fn map_parallel<T, F>(n: usize, threads: Threads, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads.0 {
        builder = builder.num_threads(t);
    }
    match builder.build() {
        Ok(pool) => pool.install(|| (0..n).into_par_iter().map(&f).collect()),
        Err(e) => {
            log::warn!("could not build thread pool ({e}); running sequentially");
            (0..n).map(f).collect()
        }
    }
}
