//! Engine assembly: the table registry, global clock, epoch manager, and
//! per-worker handles that tie the pieces together.

use std::cell::RefCell;
use std::collections::HashMap;
use std::path::Path;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use crate::epoch::{EpochGuard, EpochManager, WorkerEpoch};
use crate::sched::{BatchHooks, ExecEnv, ExecMode};
use crate::storage::Table;
use crate::txn::{GlobalClock, SlotState, TxnHandle};
use crate::wal::LogSink;
use crate::Error;

#[derive(Clone, Copy, Debug)]
pub struct EngineConfig {
    /// Maximum RIDs per table.
    pub table_capacity: u64,
    /// Per-worker retired-bytes threshold that advances the global epoch.
    pub epoch_advance_bytes: u64,
    /// Maximum concurrently registered workers.
    pub max_workers: usize,
    /// Cache lines prefetched per suspension hint (None: the whole span).
    pub prefetch_lines: Option<usize>,
    /// Per-transaction log buffer limit in bytes.
    pub txn_log_limit: usize,
    /// Initial capacity of each slot's scratch arena.
    pub scratch_capacity: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            table_capacity: 1 << 28,
            epoch_advance_bytes: 16 << 20,
            max_workers: 128,
            prefetch_lines: None,
            txn_log_limit: 16 << 20,
            scratch_capacity: 4096,
        }
    }
}

/// The shared engine: any worker may access any table; cross-worker
/// coordination happens only through atomic chain installs, the global
/// clock, and the epoch manager.
pub struct Engine {
    config: EngineConfig,
    clock: GlobalClock,
    epoch: Arc<EpochManager>,
    tables: RwLock<HashMap<String, Arc<Table>>>,
    table_seq: AtomicU64,
    commits: AtomicU64,
    aborts: AtomicU64,
}

impl Engine {
    pub fn new(config: EngineConfig) -> Arc<Engine> {
        Arc::new(Engine {
            config,
            clock: GlobalClock::new(),
            epoch: EpochManager::new(config.max_workers, config.epoch_advance_bytes),
            tables: RwLock::new(HashMap::new()),
            table_seq: AtomicU64::new(0),
            commits: AtomicU64::new(0),
            aborts: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn clock(&self) -> &GlobalClock {
        &self.clock
    }

    pub fn epoch_manager(&self) -> &Arc<EpochManager> {
        &self.epoch
    }

    /// Creates an empty table with a fresh primary index.
    pub fn table_create(&self, name: &str) -> Result<Arc<Table>, Error> {
        let mut tables = self.tables.write().unwrap();
        if tables.contains_key(name) {
            return Err(Error::DuplicateTable(name.to_string()));
        }
        let id = self.table_seq.fetch_add(1, Ordering::AcqRel);
        let t = Arc::new(Table::new(name.to_string(), id, self.config.table_capacity));
        tables.insert(name.to_string(), Arc::clone(&t));
        Ok(t)
    }

    pub fn table(&self, name: &str) -> Result<Arc<Table>, Error> {
        self.tables
            .read()
            .unwrap()
            .get(name)
            .cloned()
            .ok_or_else(|| Error::NoSuchTable(name.to_string()))
    }

    /// Marks a table dead and unregisters its name. Outstanding handles
    /// keep the storage alive; new allocations fail.
    pub fn table_close(&self, name: &str) -> Result<(), Error> {
        let t = self
            .tables
            .write()
            .unwrap()
            .remove(name)
            .ok_or_else(|| Error::NoSuchTable(name.to_string()))?;
        t.close();
        Ok(())
    }

    pub fn commit_count(&self) -> u64 {
        self.commits.load(Ordering::Relaxed)
    }

    pub fn abort_count(&self) -> u64 {
        self.aborts.load(Ordering::Relaxed)
    }

    pub(crate) fn note_commit(&self) {
        self.commits.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn note_abort(&self) {
        self.aborts.fetch_add(1, Ordering::Relaxed);
    }
}

/// Where a worker's log sink writes.
pub enum SinkConfig<'a> {
    Memory,
    Dir(&'a Path),
    Discard,
}

/// One worker: an execution environment, an epoch registration, a log
/// sink, and `batch_size` reusable transaction slots. Workers are
/// single-threaded; construct on the thread that runs the scheduler.
#[derive(Clone)]
pub struct Worker {
    engine: Arc<Engine>,
    id: u16,
    env: Rc<ExecEnv>,
    epoch: Rc<RefCell<WorkerEpoch>>,
    sink: Rc<RefCell<LogSink>>,
    slots: Vec<Rc<RefCell<SlotState>>>,
}

impl Worker {
    pub fn new(
        engine: &Arc<Engine>,
        id: u16,
        mode: ExecMode,
        batch_size: usize,
        sink: SinkConfig<'_>,
    ) -> Result<Worker, Error> {
        let env = ExecEnv::new(mode, engine.config.prefetch_lines);
        let mut epoch = engine.epoch.register()?;
        epoch.attach_env(Rc::clone(&env));
        let sink = match sink {
            SinkConfig::Memory => LogSink::memory(id),
            SinkConfig::Discard => LogSink::discard(id),
            SinkConfig::Dir(dir) => LogSink::file(id, dir)
                .map_err(|_| Error::InvalidArg("cannot open log sink file"))?,
        };
        let slots = (0..batch_size.max(1))
            .map(|s| {
                Rc::new(RefCell::new(SlotState::new(
                    id,
                    s as u16,
                    engine.config.txn_log_limit,
                    engine.config.scratch_capacity,
                )))
            })
            .collect();
        Ok(Worker {
            engine: Arc::clone(engine),
            id,
            env,
            epoch: Rc::new(RefCell::new(epoch)),
            sink: Rc::new(RefCell::new(sink)),
            slots,
        })
    }

    pub fn id(&self) -> u16 {
        self.id
    }

    pub fn engine(&self) -> &Arc<Engine> {
        &self.engine
    }

    pub fn env(&self) -> &Rc<ExecEnv> {
        &self.env
    }

    pub fn batch_size(&self) -> usize {
        self.slots.len()
    }

    /// Starts a transaction bound to `slot`. Errors if the slot's previous
    /// transaction has not concluded.
    pub fn begin(&self, slot: usize) -> Result<TxnHandle, Error> {
        let state = self
            .slots
            .get(slot)
            .ok_or(Error::InvalidArg("slot index out of batch bounds"))?;
        TxnHandle::begin(
            Arc::clone(&self.engine),
            Rc::clone(&self.env),
            Rc::clone(&self.epoch),
            Rc::clone(&self.sink),
            Rc::clone(state),
        )
    }

    /// Batch-boundary hooks wiring epoch enter/exit into the scheduler.
    pub fn epoch_hooks(&self) -> EpochHooks {
        EpochHooks {
            epoch: Rc::clone(&self.epoch),
            guard: None,
        }
    }

    pub fn epoch_stats(&self) -> crate::epoch::EpochStats {
        self.epoch.borrow().stats()
    }

    pub fn sink_extents(&self) -> u64 {
        self.sink.borrow().extents()
    }

    pub fn sink_bytes(&self) -> u64 {
        self.sink.borrow().bytes()
    }

    pub fn sink_ts_monotonic(&self) -> bool {
        self.sink.borrow().ts_monotonic()
    }

    /// Memory-sink contents for audits.
    pub fn sink_memory(&self) -> Option<Vec<u8>> {
        self.sink.borrow().memory_bytes().map(|b| b.to_vec())
    }

    /// End-of-run cleanup: flush the sink and drain the retire lists.
    pub fn finish(&self) {
        self.sink.borrow_mut().finish();
        self.epoch.borrow_mut().drain();
    }
}

/// Enters the epoch when a batch starts and exits when it completes.
pub struct EpochHooks {
    epoch: Rc<RefCell<WorkerEpoch>>,
    guard: Option<EpochGuard>,
}

impl BatchHooks for EpochHooks {
    fn batch_start(&mut self) {
        debug_assert!(self.guard.is_none(), "batch started with a live guard");
        let g = self
            .epoch
            .borrow_mut()
            .enter()
            .expect("no live guard between batches");
        self.guard = Some(g);
    }

    fn batch_end(&mut self) {
        let g = self.guard.take().expect("batch end without a guard");
        self.epoch.borrow_mut().exit(g);
    }
}
