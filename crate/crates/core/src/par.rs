//! Path-loop helpers. With the `parallel` feature the loops fan out on rayon;
//! without it they run in order. Output order is always the index order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::Result;

#[cfg(feature = "parallel")]
thread_local! {
    static SEQUENTIAL: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

/// Runs `f` with every path loop started from this thread executed in order
/// on this thread, as if the `parallel` feature were off. Results are the
/// same either way.
pub fn run_sequential<R>(f: impl FnOnce() -> R) -> R {
    #[cfg(feature = "parallel")]
    {
        let prev = SEQUENTIAL.with(|s| s.replace(true));
        let out = f();
        SEQUENTIAL.with(|s| s.set(prev));
        out
    }
    #[cfg(not(feature = "parallel"))]
    {
        f()
    }
}

#[cfg(feature = "parallel")]
fn sequential() -> bool {
    SEQUENTIAL.with(|s| s.get())
}

pub(crate) fn map_indices<T, F>(count: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if !sequential() {
        return (0..count).into_par_iter().map(f).collect();
    }
    (0..count).map(f).collect()
}

/// Like [`map_indices`] but fallible; the reported error is the one with the
/// smallest index, independent of scheduling.
pub(crate) fn try_map_indices<T, F>(count: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    map_indices(count, f).into_iter().collect()
}

/// Runs `f` on consecutive `width`-sized chunks of `data`, chunk `i` being the
/// data of index `i`.
pub(crate) fn for_each_chunk<T, F>(data: &mut [T], width: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if width == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if !sequential() {
        data.par_chunks_mut(width).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(width).enumerate().for_each(|(i, c)| f(i, c));
}

/// Fixed block size for partial sums; blocks are combined in index order so
/// the floating-point result is independent of the thread count.
pub(crate) const REDUCE_BLOCK: usize = 256;

pub(crate) fn blocked_sum<T, F, G>(count: usize, zero: G, f: F) -> T
where
    T: Send + std::ops::AddAssign,
    F: Fn(usize, &mut T) + Sync + Send,
    G: Fn() -> T + Sync + Send,
{
    let blocks = count.div_ceil(REDUCE_BLOCK);
    let partials = map_indices(blocks, |b| {
        let mut acc = zero();
        let end = ((b + 1) * REDUCE_BLOCK).min(count);
        for i in b * REDUCE_BLOCK..end {
            f(i, &mut acc);
        }
        acc
    });
    let mut total = zero();
    for p in partials {
        total += p;
    }
    total
}
