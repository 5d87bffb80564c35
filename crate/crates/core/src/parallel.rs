//! Thin switch between rayon and sequential execution.
//!
//! With the `parallel` feature (default) the helpers fan out over the global
//! rayon pool; without it they run in the calling thread. Work is always split
//! over disjoint outputs, so results are bitwise identical in both modes.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Minimum number of scalar multiply-adds before a kernel bothers to fan out.
pub const PAR_THRESHOLD: usize = 1 << 15;

/// Configure the global worker count. Returns `false` when the pool was
/// already initialised (or the crate was built without `parallel`).
pub fn set_workers(n: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
        false
    }
}

pub fn enabled() -> bool {
    cfg!(feature = "parallel")
}

/// Apply `f(chunk_index, chunk)` to consecutive `chunk`-sized pieces of `out`.
pub fn for_each_chunk<F>(out: &mut [f64], chunk: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Send + Sync,
{
    if chunk == 0 || out.is_empty() {
        return;
    }
    #[cfg(feature = "parallel")]
    if work >= PAR_THRESHOLD {
        out.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = work;
    out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Order-preserving map over `0..n`.
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}
