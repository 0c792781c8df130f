//! Data-parallel helpers. With the `parallel` feature the maps run on the
//! rayon pool; without it they run sequentially. Reductions always combine
//! results in a fixed pairwise tree over index order, so sums are bitwise
//! identical regardless of thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// `f(0), …, f(n−1)` in index order.
pub fn map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
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

/// Pairwise tree reduction with fan-in 2 over index order.
pub fn tree_reduce<T, F>(mut items: Vec<T>, combine: F) -> Option<T>
where
    F: Fn(T, T) -> T,
{
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(combine(a, b)),
                None => next.push(a),
            }
        }
        items = next;
    }
    items.pop()
}

pub fn sum_f64(items: Vec<f64>) -> f64 {
    tree_reduce(items, |a, b| a + b).unwrap_or(0.0)
}

/// Elementwise sum of equal-length vectors.
pub fn sum_vecs(items: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    tree_reduce(items, |mut a, b| {
        for (x, y) in a.iter_mut().zip(&b) {
            *x += y;
        }
        a
    })
    .unwrap_or_else(|| vec![0.0; len])
}

/// Deterministic `Σ_i f(i)`.
pub fn sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    sum_f64(map(n, f))
}

/// Sizes the global worker pool. Only the first call takes effect; without
/// the `parallel` feature this is a no-op.
pub fn set_threads(n: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
        false
    }
}

/// Runs `f` on a dedicated pool of `n` threads; `n = 1` gives the sequential
/// schedule. Without the `parallel` feature `f` simply runs.
pub fn with_threads<R, F>(n: usize, f: F) -> R
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    #[cfg(feature = "parallel")]
    {
        match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
        f()
    }
}

/// Whether the maps run on a thread pool.
pub const PARALLEL: bool = cfg!(feature = "parallel");
