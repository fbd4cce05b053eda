//! Data-parallel execution helpers.
//!
//! With the `parallel` feature (default) independent rows and jobs are fanned
//! out over the rayon pool. Without it, or while [`sequential`] scopes are
//! active, the same closures run in order on the calling thread. Every helper
//! writes results into disjoint, index-addressed slots, so both paths produce
//! bitwise-identical output.

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Rows shorter than this are not worth a task.
#[cfg(feature = "parallel")]
const MIN_PARALLEL_WORK: usize = 4096;

/// Whether the helpers in this module currently dispatch to rayon.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::Relaxed)
}

/// Toggle the sequential fallback at runtime. Only benches and the CLI use
/// this; results do not depend on the setting.
pub fn set_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::Relaxed);
}

/// Apply `f(row_index, row)` to each `row_len`-sized chunk of `data`.
pub fn rows_mut<T, F>(data: &mut [T], row_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if is_parallel() && data.len() >= MIN_PARALLEL_WORK {
        use rayon::prelude::*;
        data.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
        return;
    }
    data.chunks_mut(row_len)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}

/// Like [`rows_mut`] over two buffers split with their own row lengths.
pub fn rows2_mut<A, B, F>(a: &mut [A], a_len: usize, b: &mut [B], b_len: usize, f: F)
where
    A: Send,
    B: Send,
    F: Fn(usize, &mut [A], &mut [B]) + Send + Sync,
{
    if a_len == 0 || b_len == 0 {
        return;
    }
    debug_assert_eq!(a.len() / a_len, b.len() / b_len);
    #[cfg(feature = "parallel")]
    if is_parallel() && a.len() + b.len() >= MIN_PARALLEL_WORK {
        use rayon::prelude::*;
        a.par_chunks_mut(a_len)
            .zip(b.par_chunks_mut(b_len))
            .enumerate()
            .for_each(|(i, (ra, rb))| f(i, ra, rb));
        return;
    }
    a.chunks_mut(a_len)
        .zip(b.chunks_mut(b_len))
        .enumerate()
        .for_each(|(i, (ra, rb))| f(i, ra, rb));
}

/// Evaluate `f` for every index in `0..n`, returning results in index order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if is_parallel() && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_mut_visits_every_row_once() {
        let mut v = vec![0usize; 3 * 5000];
        rows_mut(&mut v, 3, |i, row| row.iter_mut().for_each(|x| *x += i));
        for (i, row) in v.chunks(3).enumerate() {
            assert!(row.iter().all(|&x| x == i));
        }
    }

    #[test]
    fn map_indexed_keeps_order() {
        let out = map_indexed(100, |i| i * i);
        assert_eq!(out, (0..100).map(|i| i * i).collect::<Vec<_>>());
    }
}
