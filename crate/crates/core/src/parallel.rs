//! Deterministic parallel reductions over sample indices.
//!
//! Work is split into fixed windows that do not depend on the thread count.
//! Inside a window the per-index results are computed in parallel; they are
//! then folded strictly in index order, so floating-point sums come out
//! bit-identical at any pool size.

use rayon::prelude::*;

use crate::error::Result;

/// Number of indices evaluated together before folding.
pub const WINDOW: usize = 32;

/// Evaluates `f(i)` for `i in 0..n` and folds the results in index order.
pub fn ordered_fold<T, A>(
    n: usize,
    f: impl Fn(usize) -> Result<T> + Sync,
    init: A,
    mut fold: impl FnMut(A, usize, T) -> A,
) -> Result<A>
where
    T: Send,
{
    let mut acc = init;
    let mut start = 0;
    while start < n {
        let end = (start + WINDOW).min(n);
        let part: Vec<Result<T>> = (start..end).into_par_iter().map(&f).collect();
        for (offset, item) in part.into_iter().enumerate() {
            acc = fold(acc, start + offset, item?);
        }
        start = end;
    }
    Ok(acc)
}

/// Evaluates `f(i)` for `i in 0..n` in parallel, keeping index order.
pub fn ordered_map<T: Send>(n: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    (0..n).into_par_iter().map(f).collect()
}

/// Sums vectors `f(i)` in index order.
pub fn ordered_vec_sum(
    n: usize,
    len: usize,
    f: impl Fn(usize) -> Result<Vec<f64>> + Sync,
) -> Result<Vec<f64>> {
    ordered_fold(n, f, vec![0.0; len], |mut acc, _, v| {
        crate::linalg::axpy(&mut acc, 1.0, &v);
        acc
    })
}

/// Runs `f` on a dedicated pool of `threads` workers.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| crate::error::invalid("threads", e.to_string()))?;
    Ok(pool.install(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_identical_across_pool_sizes() {
        let f = |i: usize| Ok(vec![(i as f64).sin() * 1e-3, 1.0 / (i as f64 + 1.0)]);
        let mut results = Vec::new();
        for threads in [1, 2, 8] {
            results.push(with_threads(threads, || ordered_vec_sum(1000, 2, f)).unwrap().unwrap());
        }
        for r in &results[1..] {
            assert_eq!(r[0].to_bits(), results[0][0].to_bits());
            assert_eq!(r[1].to_bits(), results[0][1].to_bits());
        }
    }

    #[test]
    fn errors_propagate() {
        let r: Result<Vec<usize>> = ordered_map(10, |i| {
            if i == 7 {
                Err(crate::error::invalid("i", "seven"))
            } else {
                Ok(i)
            }
        });
        assert!(r.is_err());
    }
}
