//! Batch-scoped epoch-based memory reclamation.
//!
//! Workers enter the epoch when they start processing a batch of
//! transactions and exit when the whole batch is done — not per transaction.
//! Because every suspended transaction in a batch belongs to the worker that
//! holds the batch's guard, a transaction suspended mid-access can never be
//! exposed by another transaction's exit: guards are batch-scoped by
//! construction, and the enter/exit API is unreachable from transaction
//! bodies (asserted in test builds).
//!
//! A resource retired in epoch `e` is reclaimed only once the global epoch
//! has advanced to at least `e + 2` and no worker announcement is `<= e`.
//! Retire lists are per-worker; the retiring worker also reclaims, so
//! destructors never race.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use crate::sched::ExecEnv;
use crate::Error;
use std::rc::Rc;

/// Announcement value of a worker that is not inside any epoch.
const QUIESCENT: u64 = u64::MAX;

#[repr(align(64))]
struct CacheAligned<T>(T);

/// Shared epoch state: the global epoch counter and one announcement slot
/// per registered worker. Announcement slots are written only by their
/// owning worker and read by anyone.
pub struct EpochManager {
    global: AtomicU64,
    slots: Box<[CacheAligned<AtomicU64>]>,
    next_slot: AtomicUsize,
    free_slots: Mutex<Vec<usize>>,
    advance_bytes: u64,
    /// Buckets left behind by deregistered workers whose grace period had
    /// not elapsed; reclaimed by whoever gets there next.
    orphans: Mutex<Vec<Bucket>>,

    epochs_advanced: AtomicU64,
    bytes_retired: AtomicU64,
    bytes_reclaimed: AtomicU64,
}

impl EpochManager {
    /// `advance_bytes` is the per-worker retired-bytes threshold that
    /// triggers a global epoch advance.
    pub fn new(max_workers: usize, advance_bytes: u64) -> Arc<Self> {
        Arc::new(EpochManager {
            global: AtomicU64::new(0),
            slots: (0..max_workers)
                .map(|_| CacheAligned(AtomicU64::new(QUIESCENT)))
                .collect(),
            next_slot: AtomicUsize::new(0),
            free_slots: Mutex::new(Vec::new()),
            advance_bytes,
            orphans: Mutex::new(Vec::new()),
            epochs_advanced: AtomicU64::new(0),
            bytes_retired: AtomicU64::new(0),
            bytes_reclaimed: AtomicU64::new(0),
        })
    }

    pub fn global(&self) -> u64 {
        self.global.load(Ordering::SeqCst)
    }

    /// Unconditional global epoch bump.
    pub fn advance(&self) -> u64 {
        self.epochs_advanced.fetch_add(1, Ordering::Relaxed);
        self.global.fetch_add(1, Ordering::SeqCst) + 1
    }

    /// Bumps the epoch iff the retired-byte threshold is met. Returns
    /// whether an advance happened.
    pub fn maybe_advance(&self, pending_bytes: u64) -> bool {
        if pending_bytes >= self.advance_bytes {
            self.advance();
            true
        } else {
            false
        }
    }

    /// Smallest announced epoch across workers; `u64::MAX` when everyone is
    /// quiescent.
    pub fn min_announced(&self) -> u64 {
        let used = self.next_slot.load(Ordering::Acquire).min(self.slots.len());
        let mut min = QUIESCENT;
        for s in &self.slots[..used] {
            min = min.min(s.0.load(Ordering::SeqCst));
        }
        min
    }

    /// Registers a worker, handing it a private retire list and an
    /// announcement slot. Must be called on the thread that will use it.
    pub fn register(self: &Arc<Self>) -> Result<WorkerEpoch, Error> {
        let id = match self.free_slots.lock().unwrap().pop() {
            Some(id) => id,
            None => {
                let id = self.next_slot.fetch_add(1, Ordering::AcqRel);
                if id >= self.slots.len() {
                    self.next_slot.fetch_sub(1, Ordering::AcqRel);
                    return Err(Error::WorkerCapacity(self.slots.len()));
                }
                id
            }
        };
        self.slots[id].0.store(QUIESCENT, Ordering::SeqCst);
        Ok(WorkerEpoch {
            mgr: Arc::clone(self),
            id,
            announced: None,
            buckets: VecDeque::new(),
            bytes_pending_advance: 0,
            resident_bytes: 0,
            stats: EpochStats::default(),
            env: None,
        })
    }

    /// Frees every orphaned bucket whose grace period has elapsed.
    pub fn reclaim_orphans(&self) {
        let mut eligible = Vec::new();
        {
            let mut orphans = self.orphans.lock().unwrap();
            if orphans.is_empty() {
                return;
            }
            let global = self.global();
            let min = self.min_announced();
            let mut i = 0;
            while i < orphans.len() {
                if orphans[i].epoch + 2 <= global && min > orphans[i].epoch {
                    eligible.push(orphans.swap_remove(i));
                } else {
                    i += 1;
                }
            }
        }
        for bucket in eligible {
            self.bytes_reclaimed
                .fetch_add(bucket.bytes, Ordering::Relaxed);
            for item in bucket.items {
                (item.free)();
            }
        }
    }

    fn max_pending_epoch(&self) -> Option<u64> {
        self.orphans.lock().unwrap().iter().map(|b| b.epoch).max()
    }

    pub fn epochs_advanced(&self) -> u64 {
        self.epochs_advanced.load(Ordering::Relaxed)
    }

    pub fn bytes_retired(&self) -> u64 {
        self.bytes_retired.load(Ordering::Relaxed)
    }

    pub fn bytes_reclaimed(&self) -> u64 {
        self.bytes_reclaimed.load(Ordering::Relaxed)
    }
}

/// Proof that a worker entered the epoch; required to exit. Exactly one can
/// be live per worker at a time (batch-scoped).
#[derive(Debug)]
#[must_use = "an epoch guard must be passed back to exit()"]
pub struct EpochGuard {
    worker: usize,
    epoch: u64,
}

impl EpochGuard {
    pub fn worker(&self) -> usize {
        self.worker
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }
}

struct Retired {
    free: Box<dyn FnOnce() + Send>,
}

struct Bucket {
    epoch: u64,
    items: Vec<Retired>,
    bytes: u64,
}

/// Per-worker counters surfaced in bench reports.
#[derive(Clone, Copy, Debug, Default)]
pub struct EpochStats {
    pub enters: u64,
    pub retired_count: u64,
    pub retired_bytes: u64,
    pub reclaimed_count: u64,
    pub reclaimed_bytes: u64,
    pub max_residency_bytes: u64,
}

/// A worker's view of the epoch machinery: its announcement slot plus its
/// private, epoch-bucketed retire lists.
pub struct WorkerEpoch {
    mgr: Arc<EpochManager>,
    id: usize,
    announced: Option<u64>,
    buckets: VecDeque<Bucket>,
    bytes_pending_advance: u64,
    resident_bytes: u64,
    stats: EpochStats,
    env: Option<Rc<ExecEnv>>,
}

impl WorkerEpoch {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn manager(&self) -> &Arc<EpochManager> {
        &self.mgr
    }

    pub fn stats(&self) -> EpochStats {
        self.stats
    }

    /// Wires up the execution environment so misuse (epoch enter/exit from
    /// inside a transaction body) is caught in test builds.
    pub fn attach_env(&mut self, env: Rc<ExecEnv>) {
        self.env = Some(env);
    }

    #[allow(unused_variables)]
    fn assert_outside_task(&self, what: &str) {
        #[cfg(debug_assertions)]
        if let Some(env) = &self.env {
            assert!(
                !env.in_task_for_assert(),
                "epoch {what} called from inside a transaction body; guards are batch-scoped"
            );
        }
    }

    /// Announces the current global epoch. Errors on double-enter.
    pub fn enter(&mut self) -> Result<EpochGuard, Error> {
        self.assert_outside_task("enter");
        if self.announced.is_some() {
            return Err(Error::InvalidArg("epoch enter while a guard is live"));
        }
        let e = self.mgr.global();
        self.mgr.slots[self.id].0.store(e, Ordering::SeqCst);
        self.announced = Some(e);
        self.stats.enters += 1;
        Ok(EpochGuard {
            worker: self.id,
            epoch: e,
        })
    }

    /// Marks the worker quiescent and opportunistically reclaims.
    pub fn exit(&mut self, guard: EpochGuard) {
        self.assert_outside_task("exit");
        assert_eq!(guard.worker, self.id, "guard returned to the wrong worker");
        debug_assert_eq!(self.announced, Some(guard.epoch));
        self.mgr.slots[self.id].0.store(QUIESCENT, Ordering::SeqCst);
        self.announced = None;
        self.try_reclaim();
    }

    pub fn is_in_epoch(&self) -> bool {
        self.announced.is_some()
    }

    /// Defers destruction of an unlinked resource until every worker has
    /// left the current epoch. `free` runs on this worker at reclamation.
    pub fn retire(&mut self, bytes: usize, free: impl FnOnce() + Send + 'static) {
        let e = self.mgr.global();
        match self.buckets.back_mut() {
            Some(b) if b.epoch == e => {
                b.items.push(Retired {
                    free: Box::new(free),
                });
                b.bytes += bytes as u64;
            }
            _ => self.buckets.push_back(Bucket {
                epoch: e,
                items: vec![Retired {
                    free: Box::new(free),
                }],
                bytes: bytes as u64,
            }),
        }
        self.stats.retired_count += 1;
        self.stats.retired_bytes += bytes as u64;
        self.resident_bytes += bytes as u64;
        self.stats.max_residency_bytes = self.stats.max_residency_bytes.max(self.resident_bytes);
        self.mgr
            .bytes_retired
            .fetch_add(bytes as u64, Ordering::Relaxed);

        self.bytes_pending_advance += bytes as u64;
        if self.mgr.maybe_advance(self.bytes_pending_advance) {
            self.bytes_pending_advance = 0;
        }
    }

    /// Frees every bucket whose grace period has elapsed: retirement epoch
    /// at least two behind the global epoch and no announcement at or below
    /// it.
    pub fn try_reclaim(&mut self) {
        let global = self.mgr.global();
        let min = self.mgr.min_announced();
        while let Some(front) = self.buckets.front() {
            if front.epoch + 2 <= global && min > front.epoch {
                let bucket = self.buckets.pop_front().unwrap();
                self.resident_bytes -= bucket.bytes;
                self.stats.reclaimed_bytes += bucket.bytes;
                self.mgr
                    .bytes_reclaimed
                    .fetch_add(bucket.bytes, Ordering::Relaxed);
                for item in bucket.items {
                    self.stats.reclaimed_count += 1;
                    (item.free)();
                }
            } else {
                break;
            }
        }
        self.mgr.reclaim_orphans();
    }

    pub fn pending_retired(&self) -> usize {
        self.buckets.iter().map(|b| b.items.len()).sum()
    }

    /// Shutdown path: advances the epoch past every pending bucket (own and
    /// orphaned) and reclaims what the safety rule allows. With all other
    /// workers quiescent this empties the retire lists.
    pub fn drain(&mut self) {
        loop {
            let mut target = None;
            if let Some(b) = self.buckets.back() {
                target = Some(b.epoch + 2);
            }
            if let Some(e) = self.mgr.max_pending_epoch() {
                target = Some(target.map_or(e + 2, |t: u64| t.max(e + 2)));
            }
            let Some(target) = target else { return };
            while self.mgr.global() < target {
                self.mgr.advance();
            }
            let before = self.pending_retired() + self.mgr.orphans.lock().unwrap().len();
            self.try_reclaim();
            let after = self.pending_retired() + self.mgr.orphans.lock().unwrap().len();
            if after == 0 || after == before {
                return; // done, or another worker still announced
            }
        }
    }
}

impl Drop for WorkerEpoch {
    fn drop(&mut self) {
        if self.announced.is_some() {
            self.mgr.slots[self.id].0.store(QUIESCENT, Ordering::SeqCst);
            self.announced = None;
        }
        self.drain();
        // Whatever the grace period still protects is handed to the
        // manager; destructors must not be lost.
        if !self.buckets.is_empty() {
            let mut orphans = self.mgr.orphans.lock().unwrap();
            orphans.extend(self.buckets.drain(..));
        }
        self.mgr.free_slots.lock().unwrap().push(self.id);
    }
}

impl Drop for EpochManager {
    fn drop(&mut self) {
        // No workers can exist (they hold an Arc to the manager), so every
        // orphan is safe to free.
        for bucket in self.orphans.lock().unwrap().drain(..) {
            for item in bucket.items {
                (item.free)();
            }
        }
    }
}
