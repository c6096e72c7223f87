//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) these fan out over the rayon pool;
//! without it they run sequentially. Results always come back in index order
//! and reductions are performed by the caller over that ordered output, so
//! numeric results are identical between the two builds and across thread
//! counts.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "FLOODSR_THREADS";

/// True when compiled with the rayon backend.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

/// Configure the global pool from `FLOODSR_THREADS`, if set. Returns the
/// number of workers in effect.
pub fn init_from_env() -> usize {
    #[cfg(feature = "parallel")]
    {
        if let Some(n) = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
        {
            // Ignore the error raised when the pool was already built.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// `(0..n).map(f).collect()`, possibly in parallel.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
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

/// `items.iter().map(f).collect()`, possibly in parallel.
pub fn map_slice<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
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

/// Run `f(chunk_index, chunk)` over consecutive `chunk`-sized pieces of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// Elementwise update over two equally sized slices, chunked.
pub fn zip_chunks_mut<T, U, F>(dst: &mut [T], src: &[U], chunk: usize, f: F)
where
    T: Send,
    U: Sync,
    F: Fn(&mut [T], &[U]) + Sync + Send,
{
    assert_eq!(dst.len(), src.len());
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    {
        dst.par_chunks_mut(chunk)
            .zip(src.par_chunks(chunk))
            .for_each(|(d, s)| f(d, s));
    }
    #[cfg(not(feature = "parallel"))]
    {
        dst.chunks_mut(chunk)
            .zip(src.chunks(chunk))
            .for_each(|(d, s)| f(d, s));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_range_keeps_order() {
        let v = map_range(100, |i| i * 2);
        assert_eq!(v, (0..100).map(|i| i * 2).collect::<Vec<_>>());
    }

    #[test]
    fn chunks_cover_everything() {
        let mut v = vec![0usize; 37];
        for_each_chunk_mut(&mut v, 5, |ci, c| {
            for (j, x) in c.iter_mut().enumerate() {
                *x = ci * 5 + j;
            }
        });
        assert_eq!(v, (0..37).collect::<Vec<_>>());
    }
}
