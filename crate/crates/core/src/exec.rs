//! Order-preserving map over independent jobs (chains, replications).
//!
//! With the `parallel` feature the jobs run on rayon; `PSLFM_THREADS` caps
//! the worker count. Without it, or with [`ExecMode::Sequential`], jobs run
//! in index order on the calling thread. Results are always returned in
//! index order, so output never depends on scheduling.

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "PSLFM_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    Sequential,
    #[default]
    Parallel,
}

impl ExecMode {
    /// `Parallel` when the crate was built with rayon, else `Sequential`.
    pub fn available() -> Self {
        if cfg!(feature = "parallel") {
            ExecMode::Parallel
        } else {
            ExecMode::Sequential
        }
    }
}

/// Worker cap read from [`THREADS_ENV`]; `None` when unset or invalid.
pub fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    map_indexed_with(ExecMode::available(), n, f)
}

pub fn map_indexed_with<T, F>(mode: ExecMode, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match mode {
        ExecMode::Sequential => (0..n).map(f).collect(),
        ExecMode::Parallel => parallel_map(n, f),
    }
}

#[cfg(feature = "parallel")]
fn parallel_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    use std::sync::OnceLock;

    static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();
    let pool = POOL.get_or_init(|| {
        thread_cap().and_then(|k| rayon::ThreadPoolBuilder::new().num_threads(k).build().ok())
    });
    let run = || (0..n).into_par_iter().map(&f).collect();
    match pool {
        // already inside the capped pool: nested jobs share it
        Some(p) if rayon::current_thread_index().is_none() => p.install(run),
        _ => run(),
    }
}

#[cfg(not(feature = "parallel"))]
fn parallel_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}
