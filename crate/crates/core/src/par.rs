//! Data-parallel helpers.
//!
//! With the `parallel` feature the batch loops in the convolution kernels and
//! the evaluation/restart loops fan out over rayon. Without it, or inside
//! [`sequential`], the same closures run in a plain loop. Partial results are
//! always combined in index order, so both paths produce identical bits.

use std::sync::atomic::{AtomicUsize, Ordering};

static SEQUENTIAL_DEPTH: AtomicUsize = AtomicUsize::new(0);

/// Whether helpers in this module currently dispatch to rayon.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && SEQUENTIAL_DEPTH.load(Ordering::Relaxed) == 0
}

/// Run `f` with all helpers forced onto the calling thread.
///
/// The switch is process-wide; it exists for benchmarking the two paths
/// against each other.
pub fn sequential<R>(f: impl FnOnce() -> R) -> R {
    struct Guard;
    impl Drop for Guard {
        fn drop(&mut self) {
            SEQUENTIAL_DEPTH.fetch_sub(1, Ordering::Relaxed);
        }
    }
    SEQUENTIAL_DEPTH.fetch_add(1, Ordering::Relaxed);
    let _g = Guard;
    f()
}

/// Apply `f(chunk_index, chunk)` to consecutive `chunk`-sized pieces of `data`.
pub fn for_each_chunk_mut<T, G>(data: &mut [T], chunk: usize, f: G)
where
    T: Send,
    G: Fn(usize, &mut [T]) + Send + Sync,
{
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Evaluate `f(i)` for `i in 0..n`, returning results in index order.
pub fn map_indexed<T, G>(n: usize, f: G) -> Vec<T>
where
    T: Send,
    G: Fn(usize) -> T + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Fallible variant of [`map_indexed`]; the first error in index order wins.
pub fn try_map_indexed<T, E, G>(n: usize, f: G) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    G: Fn(usize) -> Result<T, E> + Send + Sync,
{
    map_indexed(n, f).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_cover_everything_in_both_modes() {
        let run = || {
            let mut v = vec![0usize; 103];
            for_each_chunk_mut(&mut v, 10, |i, c| {
                for x in c.iter_mut() {
                    *x = i;
                }
            });
            v
        };
        let a = run();
        let b = sequential(run);
        assert_eq!(a, b);
        assert_eq!(a[102], 10);
    }

    #[test]
    fn map_preserves_order() {
        let v = map_indexed(50, |i| i * i);
        assert_eq!(v[7], 49);
        let r: Result<Vec<usize>, usize> = try_map_indexed(10, |i| if i == 3 { Err(i) } else { Ok(i) });
        assert_eq!(r, Err(3));
    }
}
