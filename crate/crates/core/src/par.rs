//! Data-parallel map helpers.
//!
//! The per-sample work in training and evaluation (candidate decoding,
//! scoring, winner backprop) is independent across samples, so it runs on
//! rayon when the `parallel` feature (default) is enabled. Results are always
//! collected back in input order and reduced sequentially, so the numeric
//! output is identical with and without the feature and for any thread count.

/// Map over items, parallel when the `parallel` feature is on.
/// Output order always matches input order.
#[cfg(feature = "parallel")]
pub fn ordered_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn ordered_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Sequential map with the same signature; kept unconditionally so benches
/// can compare both paths in one build.
pub fn sequential_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.iter().map(f).collect()
}
