//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) the helpers run on the rayon global
//! pool. Without it, or inside [`sequential`], they run on the calling thread.
//! Both paths produce bit-identical results: per-item work never depends on
//! scheduling, and reductions use a fixed chunking and a fixed pairwise tree.

use std::cell::Cell;
use std::ops::Range;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Observations per chunk in [`chunk_reduce`].
pub const CHUNK: usize = 256;

thread_local! {
    static FORCE_SEQUENTIAL: Cell<bool> = const { Cell::new(false) };
}

/// Run `f` with all helpers in this module forced onto the calling thread.
pub fn sequential<R>(f: impl FnOnce() -> R) -> R {
    struct Reset(bool);
    impl Drop for Reset {
        fn drop(&mut self) {
            FORCE_SEQUENTIAL.with(|c| c.set(self.0));
        }
    }
    let prev = FORCE_SEQUENTIAL.with(|c| c.replace(true));
    let _reset = Reset(prev);
    f()
}

/// Whether the helpers would currently dispatch to rayon.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.with(|c| c.get())
}

/// `(0..n).map(f).collect()`, in parallel when enabled. Output order is index order.
pub fn map_collect<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if is_parallel() {
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Map each fixed-size chunk of `0..n` with `f`, then fold the chunk results
/// with `combine` in a fixed pairwise tree. Returns `None` when `n == 0`.
pub fn chunk_reduce<T, F, C>(n: usize, f: F, combine: C) -> Option<T>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync + Send,
    C: Fn(T, T) -> T,
{
    let n_chunks = n.div_ceil(CHUNK);
    let parts = map_collect(n_chunks, |c| f(c * CHUNK..((c + 1) * CHUNK).min(n)));
    pairwise_fold(parts, &combine)
}

fn pairwise_fold<T, C: Fn(T, T) -> T>(mut parts: Vec<T>, combine: &C) -> Option<T> {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(combine(a, b)),
                None => next.push(a),
            }
        }
        parts = next;
    }
    parts.pop()
}

/// Sum of `f(i)` over `0..n` with the deterministic chunked reduction.
pub fn sum_by<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    chunk_reduce(n, |r| r.map(&f).sum::<f64>(), |a, b| a + b).unwrap_or(0.0)
}
