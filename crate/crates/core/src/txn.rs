//! Snapshot-isolation transactions.
//!
//! VISIBILITY
//! ==========
//!
//! Timestamps come from a global, monotonically increasing counter. A
//! transaction reads the counter at begin to obtain its begin timestamp
//! `b`; when reading a record it walks the version chain and takes the
//! first version that is either its own uncommitted write (owner stamp
//! matches) or committed strictly before `b`. Begin reads the counter
//! after prior commits' increments, so every commit that completed before
//! the snapshot was taken is strictly below `b` (see [`GlobalClock`]); a
//! version stamped at or above `b` was still in flight and is invisible.
//!
//! WRITES
//! ======
//!
//! Updates are first-updater-wins: a writer that finds the chain head
//! owner-marked by another transaction, or committed at or after its begin
//! timestamp, aborts immediately rather than waiting (waiting while
//! suspended could deadlock a batch). Otherwise it installs an owner-marked
//! version at the head with an atomic conditional update; losing that race
//! also aborts. Deletes install tombstone versions. Writing the same key
//! twice in one transaction replaces the head owner version in place, so a
//! chain holds at most one owner version per transaction.
//!
//! At commit the transaction atomically increments the counter to obtain a
//! unique commit timestamp, seals its log buffer into the worker's sink,
//! and only then overwrites the owner stamps with the commit stamp.
//! Read-only commits consume no timestamp. Aborts uninstall owner versions
//! eagerly (restoring the previous head) and retire them through the epoch
//! machinery, since concurrent readers may still hold chain pointers.
//!
//! SUSPENSION
//! ==========
//!
//! Every record access is a suspendable operation: it prefetch-suspends
//! through the index traversal and again before each version-chain
//! dereference. In two-level mode the whole engine call is one flattened
//! resumable; in fully-nested mode the index search and the chain walk run
//! as separately allocated resumables. Commit and abort never suspend.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::engine::Engine;
use crate::epoch::WorkerEpoch;
use crate::sched::{frame, suspend_point, ExecEnv, ExecMode, PrefetchSpan};
use crate::storage::{OwnerId, Rid, Table, VersionRecord, VersionStamp};
use crate::wal::{LogBuffer, LogKind, LogSink};
use crate::Error;

/// Global logical clock. Begin timestamps are reads of the counter (even
/// values); commit timestamps advance it by two and stamp the odd midpoint.
/// The parity split keeps both orderings strict: a commit that completed
/// before a begin is strictly below it (its increment is visible to the
/// begin's read), and a transaction's own commit stamp is strictly above
/// its begin timestamp even when nothing else committed in between.
pub struct GlobalClock {
    counter: AtomicU64,
}

impl GlobalClock {
    pub fn new() -> Self {
        GlobalClock {
            counter: AtomicU64::new(0),
        }
    }

    /// Current value (begin timestamps).
    pub fn now(&self) -> u64 {
        self.counter.load(Ordering::SeqCst)
    }

    /// Atomically advances the counter and returns a unique commit
    /// timestamp strictly between the old and new counter values.
    pub fn next_commit(&self) -> u64 {
        self.counter.fetch_add(2, Ordering::SeqCst) + 1
    }
}

impl Default for GlobalClock {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum TxnState {
    Active,
    Committed,
    Aborted,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum AbortReason {
    /// First-updater-wins write-write conflict.
    Conflict,
    /// Update/delete of a key with no visible record.
    NotFound,
    /// Insert of an already-indexed key.
    Duplicate,
    /// Resource exhaustion (RID space, closed table).
    Resource,
    /// Transaction log buffer limit exceeded.
    LogLimit,
}

/// A write operation concluded by rolling the transaction back.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Aborted {
    pub reason: AbortReason,
}

struct WriteEntry {
    table: Arc<Table>,
    rid: Rid,
    version: *const VersionRecord,
    /// Version sits on a freshly allocated RID (insert).
    fresh: bool,
}

/// Slot-local transaction context. One per batch slot, reused across
/// batches without reallocation: buffers are cleared, never shrunk.
pub struct SlotState {
    worker: u16,
    slot: u16,
    seq: u32,
    state: TxnState,
    begin_ts: u64,
    write_set: Vec<WriteEntry>,
    read_set: Vec<(u64, Rid)>,
    log: LogBuffer,
    scratch: Vec<u8>,
}

impl SlotState {
    pub(crate) fn new(worker: u16, slot: u16, log_limit: usize, scratch_capacity: usize) -> Self {
        SlotState {
            worker,
            slot,
            seq: 0,
            state: TxnState::Committed, // vacuously concluded
            begin_ts: 0,
            write_set: Vec::new(),
            read_set: Vec::new(),
            log: LogBuffer::new(log_limit),
            scratch: Vec::with_capacity(scratch_capacity),
        }
    }

    fn owner(&self) -> OwnerId {
        OwnerId {
            worker: self.worker,
            slot: self.slot,
            seq: self.seq,
        }
    }
}

/// Marker wrapper so a raw version pointer can move into a reclamation
/// closure.
struct Reclaim(*mut VersionRecord);
// Safety: the pointed-to record is unlinked and owned solely by the closure.
unsafe impl Send for Reclaim {}

impl Reclaim {
    fn run(self) {
        unsafe { drop(Box::from_raw(self.0)) };
    }
}

/// Handle to one in-flight transaction. Cheap to clone (reference counted);
/// all suspendable operations take `&self` so intra-transaction
/// interleaving can poll several at once.
#[derive(Clone)]
pub struct TxnHandle {
    engine: Arc<Engine>,
    env: Rc<ExecEnv>,
    epoch: Rc<RefCell<WorkerEpoch>>,
    sink: Rc<RefCell<LogSink>>,
    state: Rc<RefCell<SlotState>>,
}

impl TxnHandle {
    pub(crate) fn begin(
        engine: Arc<Engine>,
        env: Rc<ExecEnv>,
        epoch: Rc<RefCell<WorkerEpoch>>,
        sink: Rc<RefCell<LogSink>>,
        state: Rc<RefCell<SlotState>>,
    ) -> Result<TxnHandle, Error> {
        {
            let mut st = state.borrow_mut();
            if st.state == TxnState::Active {
                return Err(Error::SlotBusy(st.slot as usize));
            }
            st.seq = st.seq.wrapping_add(1);
            st.begin_ts = engine.clock().now();
            st.state = TxnState::Active;
            st.write_set.clear();
            st.read_set.clear();
            st.log.clear();
        }
        Ok(TxnHandle {
            engine,
            env,
            epoch,
            sink,
            state,
        })
    }

    pub fn begin_ts(&self) -> u64 {
        self.state.borrow().begin_ts
    }

    pub fn slot(&self) -> u16 {
        self.state.borrow().slot
    }

    pub fn state(&self) -> TxnState {
        self.state.borrow().state
    }

    pub fn read_set_len(&self) -> usize {
        self.state.borrow().read_set.len()
    }

    pub fn write_set_len(&self) -> usize {
        self.state.borrow().write_set.len()
    }

    /// Borrows the slot-local scratch arena (temporaries such as values
    /// under construction). The arena's identity is stable across slot
    /// reuse.
    pub fn with_scratch<R>(&self, f: impl FnOnce(&mut Vec<u8>) -> R) -> R {
        f(&mut self.state.borrow_mut().scratch)
    }

    /// Scratch arena address; test hook for buffer-reuse assertions.
    pub fn scratch_addr(&self) -> usize {
        self.state.borrow().scratch.as_ptr() as usize
    }

    fn snapshot_identity(&self) -> (u64, OwnerId) {
        let st = self.state.borrow();
        debug_assert_eq!(
            st.state,
            TxnState::Active,
            "operation on concluded transaction"
        );
        (st.begin_ts, st.owner())
    }

    /// Reads `key`'s visible value: own uncommitted write, else the newest
    /// version committed before the begin timestamp. Tombstones and absent
    /// keys read as absent.
    pub async fn read(&self, table: &Arc<Table>, key: &[u8]) -> Option<Vec<u8>> {
        match self.env.mode() {
            ExecMode::TwoLevel => frame(&self.env, self.read_flat(table, key)).await,
            ExecMode::FullyNested => self.read_nested(table, key).await,
            _ => self.read_flat(table, key).await,
        }
    }

    async fn read_flat(&self, table: &Arc<Table>, key: &[u8]) -> Option<Vec<u8>> {
        let rid = table.index().search(&self.env, key).await?;
        self.resolve_visible(table, rid).await
    }

    async fn read_nested(&self, table: &Arc<Table>, key: &[u8]) -> Option<Vec<u8>> {
        let rid = frame(&self.env, table.index().search_nested(&self.env, key)).await?;
        frame(&self.env, self.resolve_nested(table, rid)).await
    }

    /// Chain walk as its own separately allocated resumable (fully-nested
    /// mode).
    async fn resolve_nested(&self, table: &Arc<Table>, rid: Rid) -> Option<Vec<u8>> {
        frame(&self.env, self.resolve_visible(table, rid)).await
    }

    /// Version-chain walk with prefetch+suspend before each dereference.
    async fn resolve_visible(&self, table: &Arc<Table>, rid: Rid) -> Option<Vec<u8>> {
        let (begin_ts, me) = self.snapshot_identity();
        self.state.borrow_mut().read_set.push((table.id(), rid));
        let mut ptr = table.head_ptr(rid).expect("rid obtained from index");
        while !ptr.is_null() {
            suspend_point(&self.env, PrefetchSpan::raw(ptr)).await;
            self.env.chain_steps.set(self.env.chain_steps.get() + 1);
            // Safety: versions reachable from a head are only reclaimed
            // after every in-epoch worker exits; this worker is inside its
            // batch's epoch (or single-threaded).
            let v = unsafe { &*ptr };
            let visible = match v.stamp() {
                VersionStamp::Owner(o) => o == me,
                VersionStamp::Committed(ts) => ts < begin_ts,
            };
            if visible {
                if cfg!(debug_assertions) {
                    if let VersionStamp::Owner(o) = v.stamp() {
                        assert_eq!(o, me, "dirty read of a foreign uncommitted version");
                    }
                }
                return if v.tombstone() {
                    None
                } else {
                    Some(v.payload().to_vec())
                };
            }
            ptr = v.next_ptr();
        }
        None
    }

    /// Updates an existing, visible record. First-updater-wins: conflicts
    /// abort immediately and roll the transaction back.
    pub async fn update(
        &self,
        table: &Arc<Table>,
        key: &[u8],
        value: &[u8],
    ) -> Result<(), Aborted> {
        match self.env.mode() {
            ExecMode::TwoLevel => frame(&self.env, self.write_flat(table, key, Some(value))).await,
            ExecMode::FullyNested => self.write_nested(table, key, Some(value)).await,
            _ => self.write_flat(table, key, Some(value)).await,
        }
    }

    /// Deletes via a tombstone version; contract mirrors [`TxnHandle::update`].
    pub async fn delete(&self, table: &Arc<Table>, key: &[u8]) -> Result<(), Aborted> {
        match self.env.mode() {
            ExecMode::TwoLevel => frame(&self.env, self.write_flat(table, key, None)).await,
            ExecMode::FullyNested => self.write_nested(table, key, None).await,
            _ => self.write_flat(table, key, None).await,
        }
    }

    async fn write_nested(
        &self,
        table: &Arc<Table>,
        key: &[u8],
        value: Option<&[u8]>,
    ) -> Result<(), Aborted> {
        let rid = frame(&self.env, table.index().search_nested(&self.env, key)).await;
        match rid {
            None => Err(self.fail(AbortReason::NotFound)),
            Some(rid) => frame(&self.env, self.write_at_nested(table, rid, value)).await,
        }
    }

    async fn write_at_nested(
        &self,
        table: &Arc<Table>,
        rid: Rid,
        value: Option<&[u8]>,
    ) -> Result<(), Aborted> {
        frame(&self.env, self.write_at(table, rid, value)).await
    }

    async fn write_flat(
        &self,
        table: &Arc<Table>,
        key: &[u8],
        value: Option<&[u8]>,
    ) -> Result<(), Aborted> {
        match table.index().search(&self.env, key).await {
            None => Err(self.fail(AbortReason::NotFound)),
            Some(rid) => self.write_at(table, rid, value).await,
        }
    }

    async fn write_at(
        &self,
        table: &Arc<Table>,
        rid: Rid,
        value: Option<&[u8]>,
    ) -> Result<(), Aborted> {
        let (begin_ts, me) = self.snapshot_identity();
        let tombstone = value.is_none();
        let payload: Box<[u8]> = value.unwrap_or(&[]).into();

        let head = table.head_ptr(rid).expect("rid obtained from index");
        if head.is_null() {
            // Insert rolled back after publishing the index entry.
            return Err(self.fail(AbortReason::NotFound));
        }
        suspend_point(&self.env, PrefetchSpan::raw(head)).await;
        self.env.chain_steps.set(self.env.chain_steps.get() + 1);
        // Safety: see resolve_visible.
        let h = unsafe { &*head };
        match h.stamp() {
            VersionStamp::Owner(o) if o == me => {
                // Second write to the same record: replace our own head
                // version in place.
                let newp = Box::into_raw(VersionRecord::new(
                    VersionStamp::Owner(me),
                    h.next_ptr(),
                    payload,
                    tombstone,
                ));
                let swapped = unsafe { table.replace_head(rid, head, newp) }.expect("rid in range");
                debug_assert!(swapped, "nothing else may replace an owner head");
                let bytes = unsafe { (*head).footprint() };
                self.epoch.borrow_mut().retire(bytes, {
                    let r = Reclaim(head as *mut VersionRecord);
                    move || r.run()
                });
                let mut st = self.state.borrow_mut();
                let entry = st
                    .write_set
                    .iter_mut()
                    .find(|w| w.rid == rid && w.table.id() == table.id())
                    .expect("owner head implies a write-set entry");
                entry.version = newp;
                let fresh = entry.fresh;
                let kind = log_kind(fresh, tombstone);
                let tid = table.id();
                match st
                    .log
                    .upsert(tid, rid.as_u64(), kind, unsafe { (*newp).payload() })
                {
                    Ok(()) => Ok(()),
                    Err(_) => {
                        drop(st);
                        Err(self.fail(AbortReason::LogLimit))
                    }
                }
            }
            VersionStamp::Owner(_) => Err(self.fail(AbortReason::Conflict)),
            VersionStamp::Committed(ts) if ts >= begin_ts => Err(self.fail(AbortReason::Conflict)),
            VersionStamp::Committed(_) => {
                if h.tombstone() {
                    return Err(self.fail(AbortReason::NotFound));
                }
                let newp = Box::into_raw(VersionRecord::new(
                    VersionStamp::Owner(me),
                    head,
                    payload,
                    tombstone,
                ));
                if !unsafe { table.install(rid, head, newp) }.expect("rid in range") {
                    // Raced with another writer; the version was never
                    // published.
                    unsafe { drop(Box::from_raw(newp)) };
                    return Err(self.fail(AbortReason::Conflict));
                }
                let mut st = self.state.borrow_mut();
                st.write_set.push(WriteEntry {
                    table: Arc::clone(table),
                    rid,
                    version: newp,
                    fresh: false,
                });
                let kind = log_kind(false, tombstone);
                let tid = table.id();
                match st
                    .log
                    .append(tid, rid.as_u64(), kind, unsafe { (*newp).payload() })
                {
                    Ok(()) => Ok(()),
                    Err(_) => {
                        drop(st);
                        Err(self.fail(AbortReason::LogLimit))
                    }
                }
            }
        }
    }

    /// Inserts a fresh key: allocates a RID, installs the owner version as
    /// the first chain entry, then publishes the key in the index. A
    /// duplicate rolls the version back and aborts.
    pub async fn insert(
        &self,
        table: &Arc<Table>,
        key: &[u8],
        value: &[u8],
    ) -> Result<(), Aborted> {
        match self.env.mode() {
            ExecMode::TwoLevel | ExecMode::FullyNested => {
                frame(&self.env, self.insert_flat(table, key, value)).await
            }
            _ => self.insert_flat(table, key, value).await,
        }
    }

    async fn insert_flat(
        &self,
        table: &Arc<Table>,
        key: &[u8],
        value: &[u8],
    ) -> Result<(), Aborted> {
        let (_, me) = self.snapshot_identity();
        let rid = match table.allocate_rid() {
            Ok(r) => r,
            Err(_) => return Err(self.fail(AbortReason::Resource)),
        };
        let newp = Box::into_raw(VersionRecord::new(
            VersionStamp::Owner(me),
            std::ptr::null(),
            value.into(),
            false,
        ));
        let installed =
            unsafe { table.install(rid, std::ptr::null(), newp) }.expect("fresh rid in range");
        debug_assert!(installed, "fresh rid slot is private until indexed");

        if table.index().insert(&self.env, key, rid).await {
            let mut st = self.state.borrow_mut();
            st.write_set.push(WriteEntry {
                table: Arc::clone(table),
                rid,
                version: newp,
                fresh: true,
            });
            let tid = table.id();
            match st.log.append(tid, rid.as_u64(), LogKind::Insert, value) {
                Ok(()) => Ok(()),
                Err(_) => {
                    drop(st);
                    Err(self.fail(AbortReason::LogLimit))
                }
            }
        } else {
            // The RID was never published through the index; no reader can
            // hold the version, so it is freed directly.
            let removed = unsafe { table.uninstall(rid, newp) }.expect("rid in range");
            debug_assert!(removed);
            unsafe { drop(Box::from_raw(newp)) };
            Err(self.fail(AbortReason::Duplicate))
        }
    }

    /// First `count` visible entries with key >= `start`, ascending.
    /// Invisible and tombstoned records are skipped and do not count.
    pub async fn scan(
        &self,
        table: &Arc<Table>,
        start: &[u8],
        count: usize,
    ) -> Result<Vec<(Vec<u8>, Vec<u8>)>, Error> {
        if count == 0 {
            return Err(Error::InvalidArg("scan count must be >= 1"));
        }
        match self.env.mode() {
            ExecMode::TwoLevel | ExecMode::FullyNested => {
                Ok(frame(&self.env, self.scan_flat(table, start, count)).await)
            }
            _ => Ok(self.scan_flat(table, start, count).await),
        }
    }

    async fn scan_flat(
        &self,
        table: &Arc<Table>,
        start: &[u8],
        count: usize,
    ) -> Vec<(Vec<u8>, Vec<u8>)> {
        let mut out: Vec<(Vec<u8>, Vec<u8>)> = Vec::new();
        let mut from: Vec<u8> = start.to_vec();
        loop {
            let need = count - out.len();
            let entries = table.index().scan(&self.env, &from, need).await;
            let exhausted = entries.len() < need;
            for (k, rid) in &entries {
                if let Some(val) = self.resolve_visible(table, *rid).await {
                    out.push((k.to_vec(), val));
                    if out.len() == count {
                        return out;
                    }
                }
            }
            if exhausted {
                return out;
            }
            // Lexicographic successor of the last index key seen.
            from = entries.last().unwrap().0.to_vec();
            from.push(0);
        }
    }

    /// Multi-key read: interleaves the per-key suspendable reads inside the
    /// transaction (round-robin) and returns control only when all are
    /// done. Never yields to the outer batch scheduler.
    pub async fn multi_get(&self, table: &Arc<Table>, keys: &[Vec<u8>]) -> Vec<Option<Vec<u8>>> {
        use crate::sched::Resumable;
        let mut subs: Vec<Resumable<'_, Option<Vec<u8>>>> = keys
            .iter()
            .map(|k| {
                let this = self.clone();
                let table = Arc::clone(table);
                let key = k.clone();
                Resumable::new(async move { this.read_flat(&table, &key).await })
            })
            .collect();
        loop {
            let mut all_done = true;
            for sub in subs.iter_mut() {
                if sub.is_done() {
                    continue;
                }
                if !sub.resume() {
                    all_done = false;
                    self.env.inner_yields.set(self.env.inner_yields.get() + 1);
                }
            }
            if all_done {
                break;
            }
        }
        subs.into_iter()
            .map(|mut s| s.take_result().unwrap())
            .collect()
    }

    /// Rolls back every installed version (restoring previous heads),
    /// discards the log buffer, and marks the reason. Returns the `Aborted`
    /// marker for the caller to propagate.
    fn fail(&self, reason: AbortReason) -> Aborted {
        self.rollback();
        Aborted { reason }
    }

    fn rollback(&self) {
        let mut st = self.state.borrow_mut();
        debug_assert_eq!(st.state, TxnState::Active);
        let mut epoch = self.epoch.borrow_mut();
        for w in st.write_set.drain(..) {
            let removed = unsafe { w.table.uninstall(w.rid, w.version) }.expect("rid in range");
            debug_assert!(removed, "owner heads are replaced only by their owner");
            // Concurrent readers may hold the pointer mid-walk; defer the
            // free until every worker leaves the epoch.
            let bytes = unsafe { (*w.version).footprint() };
            let r = Reclaim(w.version as *mut VersionRecord);
            epoch.retire(bytes, move || r.run());
        }
        drop(epoch);
        st.log.clear();
        st.state = TxnState::Aborted;
        drop(st);
        self.engine.note_abort();
    }

    /// Explicit abort.
    pub fn abort(&self) {
        self.rollback();
    }

    /// Commits: acquires a unique commit timestamp (none for read-only
    /// transactions), seals the log extent, then publishes the commit stamp
    /// on every written version. Never suspends. Returns the commit
    /// timestamp (begin timestamp for read-only transactions).
    pub fn commit(&self) -> Result<u64, Error> {
        let mut st = self.state.borrow_mut();
        if st.state != TxnState::Active {
            return Err(Error::InvalidArg("commit on a concluded transaction"));
        }
        if st.write_set.is_empty() {
            // Read-only: no timestamp consumed, no log extent.
            st.state = TxnState::Committed;
            let ts = st.begin_ts;
            drop(st);
            self.engine.note_commit();
            return Ok(ts);
        }
        let commit_ts = self.engine.clock().next_commit();
        debug_assert!(commit_ts > st.begin_ts);
        // Seal the log before any version becomes visible as committed.
        self.sink.borrow_mut().seal(&mut st.log, commit_ts);
        for w in st.write_set.drain(..) {
            // Safety: installed versions stay alive until retired; only
            // this transaction may stamp them.
            unsafe { (*w.version).set_committed(commit_ts) };
        }
        st.state = TxnState::Committed;
        drop(st);
        self.engine.note_commit();
        Ok(commit_ts)
    }
}

fn log_kind(fresh: bool, tombstone: bool) -> LogKind {
    if tombstone {
        LogKind::Delete
    } else if fresh {
        LogKind::Insert
    } else {
        LogKind::Update
    }
}
