//! Data-parallel iteration helpers.
//!
//! With the `parallel` feature (default) these fan work out over rayon;
//! without it they run sequentially with identical results. All callers
//! collect per-item results in input order and reduce sequentially, so
//! output bytes do not depend on the feature flag or the thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Name of the active execution mode, for logs and bench labels.
pub fn mode() -> &'static str {
    if cfg!(feature = "parallel") {
        "rayon"
    } else {
        "sequential"
    }
}

/// Map `f` over `0..n`, collecting results in index order.
#[cfg(feature = "parallel")]
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Map `f` over `0..n`, collecting results in index order.
#[cfg(not(feature = "parallel"))]
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Map `f` over the items of a slice, collecting results in input order.
#[cfg(feature = "parallel")]
pub fn map_slice<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.par_iter().map(f).collect()
}

/// Map `f` over the items of a slice, collecting results in input order.
#[cfg(not(feature = "parallel"))]
pub fn map_slice<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Map `f` over fixed-size chunks of a slice, collecting in chunk order.
///
/// The chunk size is part of the computation's definition (reductions sum
/// chunk results in order), so it must not vary with thread count.
#[cfg(feature = "parallel")]
pub fn map_chunks<T, R, F>(items: &[T], chunk: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&[T]) -> R + Sync + Send,
{
    items.par_chunks(chunk).map(f).collect()
}

/// Map `f` over fixed-size chunks of a slice, collecting in chunk order.
#[cfg(not(feature = "parallel"))]
pub fn map_chunks<T, R, F>(items: &[T], chunk: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&[T]) -> R + Sync + Send,
{
    items.chunks(chunk).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_range_preserves_order() {
        let v = map_range(100, |i| i * i);
        assert_eq!(v[7], 49);
        assert_eq!(v.len(), 100);
    }

    #[test]
    fn map_chunks_fixed_boundaries() {
        let data: Vec<u32> = (0..10).collect();
        let sums = map_chunks(&data, 4, |c| c.iter().sum::<u32>());
        assert_eq!(sums, vec![6, 22, 17]);
    }
}
