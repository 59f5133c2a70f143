//! Thin dispatch layer between rayon and plain iteration.
//!
//! Every kernel routed through here computes each output slot
//! independently, so the parallel and sequential paths produce
//! bit-identical results and the `parallel` feature only changes
//! wall-clock time.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `0..n`, preserving index order in the output.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_indexed_sequential(n, f)
    }
}

/// Sequential twin of [`map_indexed`], available regardless of features.
pub fn map_indexed_sequential<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Applies `f` to each fixed-width chunk of `out`, passing the chunk index.
///
/// Chunks are disjoint, so the parallel path needs no synchronisation.
pub fn for_each_chunk<F>(out: &mut [f64], width: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Send + Sync,
{
    assert!(width > 0, "chunk width must be positive");
    #[cfg(feature = "parallel")]
    {
        out.par_chunks_mut(width).enumerate().for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for_each_chunk_sequential(out, width, f);
    }
}

/// Sequential twin of [`for_each_chunk`].
pub fn for_each_chunk_sequential<F>(out: &mut [f64], width: usize, f: F)
where
    F: Fn(usize, &mut [f64]),
{
    assert!(width > 0, "chunk width must be positive");
    for (i, c) in out.chunks_mut(width).enumerate() {
        f(i, c);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_indexed_matches_sequential() {
        let a = map_indexed(100, |i| (i * i) as f64 / 3.0);
        let b = map_indexed_sequential(100, |i| (i * i) as f64 / 3.0);
        assert_eq!(a, b);
    }

    #[test]
    fn chunked_fill_matches_sequential() {
        let mut a = vec![0.0; 12];
        let mut b = vec![0.0; 12];
        let fill = |i: usize, c: &mut [f64]| {
            for (j, v) in c.iter_mut().enumerate() {
                *v = (i * 10 + j) as f64;
            }
        };
        for_each_chunk(&mut a, 3, fill);
        for_each_chunk_sequential(&mut b, 3, fill);
        assert_eq!(a, b);
    }
}
