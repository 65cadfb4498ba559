//! Data-parallel helpers.
//!
//! Path simulation, replicate batches, candidate scoring and MLE multi-starts
//! are all embarrassingly parallel. With the default `parallel` feature these
//! fan out over the rayon global pool; without it they degrade to plain
//! sequential iteration so the crate builds without a thread-pool dependency.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `0..n` and collect the results in order.
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
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

/// Cap the worker count of the global pool. `0` keeps the default
/// (all available cores). No-op without the `parallel` feature.
/// Returns an error message if the pool was already initialized.
pub fn configure_threads(n: usize) -> std::result::Result<(), String> {
    #[cfg(feature = "parallel")]
    {
        if n == 0 {
            return Ok(());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| e.to_string())
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
        Ok(())
    }
}
