//! Row-parallel helpers.
//!
//! With the `parallel` feature the loops below fan out over rayon's pool,
//! otherwise they run sequentially. Each output row (or item) is produced
//! by exactly one closure call with a fixed internal reduction order, so
//! results are bit-identical between the two builds.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many output elements the sequential path is always used.
const PAR_THRESHOLD: usize = 1 << 12;

/// Calls `f(i, row)` for every `cols`-wide row of `data`.
pub fn for_each_row<F>(data: &mut [f64], cols: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if cols == 0 || data.is_empty() {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if data.len() >= PAR_THRESHOLD {
            data.par_chunks_mut(cols)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
            return;
        }
    }
    let _ = PAR_THRESHOLD;
    data.chunks_mut(cols).enumerate().for_each(|(i, row)| f(i, row));
}

/// Maps `f` over `0..n`, preserving order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
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

/// Maps `f` over a slice of independent jobs, preserving order.
pub fn map_items<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Whether the crate was built with the rayon backend.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
