//! Clip-level parallelism with a sequential fallback.
//!
//! With the `parallel` feature (default) the maps fan out over rayon's pool;
//! without it they run in place. Results always come back in input order and
//! error selection is a sequential scan, so outputs — including trained
//! checkpoints — are bitwise identical whatever the thread count, and
//! identical between the two implementations.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `items`, preserving order.
#[cfg(feature = "parallel")]
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.par_iter().map(f).collect()
}

/// Map `f` over `items`, preserving order.
#[cfg(not(feature = "parallel"))]
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    map_sequential(items, f)
}

/// The sequential implementation, always available so benchmarks can
/// compare against the parallel one under identical inputs.
pub fn map_sequential<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// Fallible map: runs everything, then reports the first error in input
/// order (not the first to fail in wall-clock time).
pub fn try_map<T, R, E, F>(items: &[T], f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(&T) -> Result<R, E> + Sync + Send,
{
    map(items, f).into_iter().collect()
}

/// Sequential counterpart of [`try_map`].
pub fn try_map_sequential<T, R, E, F>(items: &[T], f: F) -> Result<Vec<R>, E>
where
    F: Fn(&T) -> Result<R, E>,
{
    map_sequential(items, f).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maps_preserve_input_order() {
        let items: Vec<usize> = (0..1000).collect();
        let doubled = map(&items, |&x| 2 * x);
        assert_eq!(doubled, map_sequential(&items, |&x| 2 * x));
        assert!(doubled.windows(2).all(|w| w[1] == w[0] + 2));
    }

    #[test]
    fn try_map_reports_the_first_error_by_position() {
        let items: Vec<usize> = (0..100).collect();
        let r: Result<Vec<usize>, usize> =
            try_map(&items, |&x| if x % 30 == 7 { Err(x) } else { Ok(x) });
        assert_eq!(r, Err(7));
        let r: Result<Vec<usize>, usize> = try_map(&items, |&x| Ok(x));
        assert_eq!(r.unwrap(), items);
    }
}
