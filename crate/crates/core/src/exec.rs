//! Batch execution helpers.
//!
//! With the `parallel` feature (on by default) `map`/`map_range` fan work out
//! to the rayon pool; without it they run sequentially. Results are collected
//! in input order and callers reduce them sequentially, so every public
//! operation in this crate produces bit-identical output with or without the
//! feature and regardless of thread count.
//!
//! The `*_seq` variants always run sequentially. They exist so the criterion
//! suite can compare the two paths inside one process.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Ordered map over a slice, parallel when the `parallel` feature is on.
pub fn map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
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

/// Ordered map over `0..n`, parallel when the `parallel` feature is on.
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

/// Always-sequential counterpart of [`map`].
pub fn map_seq<T, U, F: Fn(&T) -> U>(items: &[T], f: F) -> Vec<U> {
    items.iter().map(f).collect()
}

/// Always-sequential counterpart of [`map_range`].
pub fn map_range_seq<U, F: Fn(usize) -> U>(n: usize, f: F) -> Vec<U> {
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree_elementwise() {
        let xs: Vec<f64> = (0..1000).map(|i| i as f64 * 0.37).collect();
        let a = map(&xs, |x| x.sin() * x.cos());
        let b = map_seq(&xs, |x| x.sin() * x.cos());
        assert_eq!(a, b);
        let c = map_range(257, |i| (i as f64).sqrt());
        let d = map_range_seq(257, |i| (i as f64).sqrt());
        assert_eq!(c, d);
    }
}
