//! Data-parallel helpers. With the `parallel` feature the heavy inner loops
//! (per-day forward solves, grid-search points, Monte Carlo runs) fan out via
//! rayon; otherwise everything runs sequentially. `Parallelism::Sequential`
//! forces the sequential path at runtime even when the feature is compiled in,
//! which is what the benchmarks compare.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum Parallelism {
    #[cfg_attr(not(feature = "parallel"), default)]
    Sequential,
    #[cfg_attr(feature = "parallel", default)]
    Rayon,
}

/// Maps `f` over `items`, parallel when requested and compiled in. Output
/// order always matches input order.
pub fn map_indexed<T, U, F>(par: Parallelism, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Sync + Send,
{
    match par {
        Parallelism::Sequential => items.iter().enumerate().map(|(i, t)| f(i, t)).collect(),
        Parallelism::Rayon => {
            #[cfg(feature = "parallel")]
            {
                items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
            }
        }
    }
}

/// Honors the FLEXIO_THREADS cap. Safe to call more than once; later calls
/// are no-ops because the global rayon pool can only be built once.
pub fn init_thread_cap() {
    #[cfg(feature = "parallel")]
    {
        if let Ok(v) = std::env::var("FLEXIO_THREADS") {
            if let Ok(nt) = v.parse::<usize>() {
                if nt >= 1 {
                    let _ = rayon::ThreadPoolBuilder::new().num_threads(nt).build_global();
                }
            }
        }
    }
}
