//! Execution mode for the numeric kernels.
//!
//! With the `parallel` feature, kernels split work over independent outputs
//! (batch samples, channel slices). Every output element is reduced in a fixed
//! order by exactly one worker, so results are bit-identical to the
//! single-threaded mode; the switch exists so reproducibility tests can pin
//! the schedule anyway.

use alloc::vec::Vec;
use core::sync::atomic::{AtomicBool, Ordering};

static SINGLE_THREADED: AtomicBool = AtomicBool::new(false);

/// Forces all kernels onto the calling thread.
pub fn set_single_threaded(on: bool) {
    SINGLE_THREADED.store(on, Ordering::SeqCst);
}

pub fn is_single_threaded() -> bool {
    SINGLE_THREADED.load(Ordering::SeqCst) || !cfg!(feature = "parallel")
}

/// Runs `f(index, chunk)` over consecutive `chunk`-sized pieces of `data`.
pub(crate) fn for_each_chunk<F>(data: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if !is_single_threaded() && data.len() > chunk {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Evaluates `f` for `0..n` and collects the results in index order.
pub(crate) fn map_indices<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if !is_single_threaded() && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}
