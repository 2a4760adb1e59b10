//! Bounded producer/consumer delivery of training batches.
//!
//! Worker `w` of `W` builds the batches for iterations `start + w`,
//! `start + w + W`, ... into its own bounded channel. Batches depend only
//! on the iteration number, so the result does not depend on `W` or on
//! scheduling.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::mpsc::{sync_channel, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use voxelforge_core::training::{Batch, BatchSource, CaseSampler};
use voxelforge_core::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct PrefetchOptions {
    pub workers: usize,
    /// Batches buffered per worker.
    pub capacity: usize,
    pub timeout: Duration,
}

impl Default for PrefetchOptions {
    fn default() -> Self {
        Self {
            workers: 2,
            capacity: 2,
            timeout: Duration::from_secs(600),
        }
    }
}

struct Prefetcher {
    start: u64,
    end: u64,
    receivers: Vec<Receiver<(u64, Result<Batch>)>>,
    timeout: Duration,
}

impl BatchSource for Prefetcher {
    fn batch(&mut self, iteration: u64) -> Result<Batch> {
        if !(self.start..self.end).contains(&iteration) {
            return Err(Error::Contract(format!(
                "iteration {iteration} outside prefetched range {}..{}",
                self.start, self.end
            )));
        }
        let w = ((iteration - self.start) % self.receivers.len() as u64) as usize;
        match self.receivers[w].recv_timeout(self.timeout) {
            Ok((got, batch)) if got == iteration => batch,
            Ok((got, _)) => Err(Error::WorkerFailure(format!(
                "worker {w} delivered iteration {got}, expected {iteration} (batches must be requested in order)"
            ))),
            Err(RecvTimeoutError::Timeout) => Err(Error::WorkerFailure(format!(
                "no batch for iteration {iteration} within {:?}",
                self.timeout
            ))),
            Err(RecvTimeoutError::Disconnected) => Err(Error::WorkerFailure(format!(
                "worker {w} exited before producing iteration {iteration}"
            ))),
        }
    }
}

/// Runs `f` with a batch source fed by background workers for iterations
/// `start..end`, which must be requested in increasing order.
pub fn with_prefetch<R>(
    sampler: &CaseSampler<'_>,
    start: u64,
    end: u64,
    opts: PrefetchOptions,
    f: impl FnOnce(&mut dyn BatchSource) -> R,
) -> R {
    let workers = opts.workers.max(1);
    thread::scope(|s| {
        let mut receivers = Vec::with_capacity(workers);
        for w in 0..workers {
            let (tx, rx) = sync_channel(opts.capacity.max(1));
            receivers.push(rx);
            s.spawn(move || {
                let mut it = start + w as u64;
                while it < end {
                    let batch = catch_unwind(AssertUnwindSafe(|| sampler.make_batch(it)))
                        .unwrap_or_else(|_| Err(Error::WorkerFailure(format!("panic while building iteration {it}"))));
                    let failed = batch.is_err();
                    if tx.send((it, batch)).is_err() || failed {
                        return;
                    }
                    it += workers as u64;
                }
            });
        }
        let mut source = Prefetcher {
            start,
            end,
            receivers,
            timeout: opts.timeout,
        };
        let out = f(&mut source);
        // Dropping the receivers unblocks workers waiting on a full queue.
        drop(source);
        out
    })
}
