//! Data-parallel helpers that fall back to plain iterators when the
//! `parallel` feature is disabled.
//!
//! Every helper preserves index order in its output, so results are
//! identical between the two builds.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// `(0..len).map(f).collect()`, possibly on the rayon pool.
pub fn map_indexed<T, F>(len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..len).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..len).map(f).collect()
    }
}

/// Calls `f(i, &mut slice[i])` for every element.
pub fn for_each_indexed_mut<T, F>(slice: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        slice.par_iter_mut().enumerate().for_each(|(i, v)| f(i, v));
    }
    #[cfg(not(feature = "parallel"))]
    {
        slice.iter_mut().enumerate().for_each(|(i, v)| f(i, v));
    }
}

/// Order-preserving reduction of `f(i)` over `0..len` in fixed-size blocks.
///
/// Blocks are folded sequentially and then combined left to right, so the
/// floating-point result does not depend on the number of worker threads.
pub fn fold_blocks<A, F, G>(len: usize, block: usize, identity: A, f: F, combine: G) -> A
where
    A: Send + Sync + Clone,
    F: Fn(&mut A, usize) + Sync + Send,
    G: Fn(A, A) -> A + Sync + Send,
{
    let block = block.max(1);
    let blocks = len.div_ceil(block);
    let partials = map_indexed(blocks, |b| {
        let mut acc = identity.clone();
        for i in b * block..((b + 1) * block).min(len) {
            f(&mut acc, i);
        }
        acc
    });
    partials.into_iter().fold(identity, combine)
}

/// Runs `f` inside a pool with at most `threads` workers (ignored without
/// the `parallel` feature).
pub fn with_threads<R: Send, F: FnOnce() -> R + Send>(threads: Option<usize>, f: F) -> R {
    #[cfg(feature = "parallel")]
    {
        match threads {
            Some(n) if n > 0 => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
                Ok(pool) => pool.install(f),
                Err(_) => f(),
            },
            _ => f(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}

/// Caps the global pool at `threads` workers. Returns `false` when the pool
/// was already initialized or the `parallel` feature is disabled.
pub fn init_threads(threads: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        false
    }
}

/// Number of workers the helpers run on.
pub fn current_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}
