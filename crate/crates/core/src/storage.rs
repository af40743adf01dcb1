//! Tables, logical record ids, indirection arrays, and version-chain storage.
//!
//! Each record is identified by a logical record id ([`Rid`]) that is dense
//! per table and never reused. A per-table indirection array maps the RID to
//! the newest [`VersionRecord`] of that record; older versions hang off the
//! head through immutable `next` links, newest first. Indexes map keys to
//! RIDs, never to version pointers, so installing a new version touches only
//! the indirection slot.
//!
//! Concurrency: any worker may read any slot. The only mutations are the
//! atomic RID counter and the atomic conditional update of an indirection
//! slot ([`Table::install`] / [`Table::uninstall`]). Readers never block
//! writers and vice versa.

use std::sync::atomic::{AtomicBool, AtomicPtr, AtomicU64, Ordering};

use crate::index::BLinkTree;
use crate::Error;

/// Logical record id: dense, allocated sequentially from 0 per table,
/// never reused within a table's lifetime.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct Rid(u64);

impl Rid {
    pub fn new(v: u64) -> Self {
        Rid(v)
    }

    pub fn as_u64(self) -> u64 {
        self.0
    }
}

/// Identity of an in-flight transaction: which worker, which batch slot,
/// and a per-slot sequence number so reused slots stay distinguishable.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct OwnerId {
    pub worker: u16,
    pub slot: u16,
    pub seq: u32,
}

const OWNER_TAG: u64 = 1 << 63;
const WORKER_MAX: u64 = (1 << 15) - 1;

/// Version stamp: either the commit timestamp of a committed version or the
/// owner mark of the one uncommitted version a transaction may have at the
/// head of a chain. Packed into one atomic word in the version header.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum VersionStamp {
    /// Commit timestamp drawn from the global monotonic counter.
    Committed(u64),
    /// Uncommitted; owned by the identified transaction slot.
    Owner(OwnerId),
}

impl VersionStamp {
    fn pack(self) -> u64 {
        match self {
            VersionStamp::Committed(ts) => {
                debug_assert!(ts < OWNER_TAG, "commit timestamp overflow");
                ts
            }
            VersionStamp::Owner(id) => {
                debug_assert!(u64::from(id.worker) <= WORKER_MAX);
                OWNER_TAG
                    | (u64::from(id.worker) << 48)
                    | (u64::from(id.slot) << 32)
                    | u64::from(id.seq)
            }
        }
    }

    fn unpack(raw: u64) -> Self {
        if raw & OWNER_TAG == 0 {
            VersionStamp::Committed(raw)
        } else {
            VersionStamp::Owner(OwnerId {
                worker: ((raw >> 48) & WORKER_MAX) as u16,
                slot: (raw >> 32) as u16,
                seq: raw as u32,
            })
        }
    }
}

/// One version of one record. Immutable after its stamp becomes a commit
/// stamp; the stamp itself flips exactly once, from owner mark to commit
/// timestamp, at commit.
pub struct VersionRecord {
    stamp: AtomicU64,
    /// Next older version, or null. Fixed at construction.
    next: *const VersionRecord,
    tombstone: bool,
    payload: Box<[u8]>,
}

// Safety: `next` is immutable and points at records whose lifetime is managed
// by the owning table plus epoch-based reclamation; `payload` and `tombstone`
// are immutable; `stamp` is atomic.
unsafe impl Send for VersionRecord {}
unsafe impl Sync for VersionRecord {}

impl VersionRecord {
    pub fn new(
        stamp: VersionStamp,
        next: *const VersionRecord,
        payload: Box<[u8]>,
        tombstone: bool,
    ) -> Box<Self> {
        Box::new(VersionRecord {
            stamp: AtomicU64::new(stamp.pack()),
            next,
            tombstone,
            payload,
        })
    }

    pub fn stamp(&self) -> VersionStamp {
        VersionStamp::unpack(self.stamp.load(Ordering::Acquire))
    }

    /// Overwrites the owner mark with a commit timestamp. Called once per
    /// version, at commit, after the log extent is sealed.
    pub fn set_committed(&self, ts: u64) {
        debug_assert!(matches!(self.stamp(), VersionStamp::Owner(_)));
        self.stamp
            .store(VersionStamp::Committed(ts).pack(), Ordering::Release);
    }

    pub fn next_ptr(&self) -> *const VersionRecord {
        self.next
    }

    /// # Safety
    /// The caller must guarantee the next record has not been reclaimed,
    /// which holds for any chain reachable from an indirection slot while the
    /// caller is inside an epoch (or single-threaded).
    pub unsafe fn next(&self) -> Option<&VersionRecord> {
        self.next.as_ref()
    }

    pub fn tombstone(&self) -> bool {
        self.tombstone
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    /// Bytes this version pins in memory; used for epoch advance accounting.
    pub fn footprint(&self) -> usize {
        std::mem::size_of::<VersionRecord>() + self.payload.len()
    }
}

/// Frees an entire chain starting at `head`. Only sound when no reader can
/// hold references into the chain (table teardown).
pub(crate) unsafe fn free_chain(head: *mut VersionRecord) {
    let mut p = head;
    while !p.is_null() {
        let boxed = Box::from_raw(p);
        p = boxed.next as *mut VersionRecord;
    }
}

const CHUNK_BITS: usize = 16;
const CHUNK_SLOTS: usize = 1 << CHUNK_BITS;

type Chunk = Box<[AtomicPtr<VersionRecord>]>;

fn new_chunk() -> Chunk {
    (0..CHUNK_SLOTS)
        .map(|_| AtomicPtr::new(std::ptr::null_mut()))
        .collect()
}

/// Growable RID-indexed array of head-of-chain slots. Built as a fixed
/// directory of lazily allocated fixed-size chunks so existing slot
/// references stay stable while the array grows.
struct IndirectionArray {
    chunks: Box<[AtomicPtr<Chunk>]>,
}

impl IndirectionArray {
    fn with_capacity(capacity: u64) -> Self {
        let n_chunks = (capacity as usize).div_ceil(CHUNK_SLOTS);
        IndirectionArray {
            chunks: (0..n_chunks.max(1))
                .map(|_| AtomicPtr::new(std::ptr::null_mut()))
                .collect(),
        }
    }

    /// Makes sure the chunk covering `rid` exists. Concurrent callers race
    /// benignly; the loser frees its allocation.
    fn ensure(&self, rid: u64) {
        let ci = rid as usize >> CHUNK_BITS;
        let dir = &self.chunks[ci];
        if !dir.load(Ordering::Acquire).is_null() {
            return;
        }
        let fresh = Box::into_raw(Box::new(new_chunk()));
        if dir
            .compare_exchange(
                std::ptr::null_mut(),
                fresh,
                Ordering::AcqRel,
                Ordering::Acquire,
            )
            .is_err()
        {
            unsafe { drop(Box::from_raw(fresh)) };
        }
    }

    fn slot(&self, rid: u64) -> &AtomicPtr<VersionRecord> {
        let ci = rid as usize >> CHUNK_BITS;
        let chunk = self.chunks[ci].load(Ordering::Acquire);
        debug_assert!(!chunk.is_null(), "slot read before allocation");
        unsafe { &(*chunk)[rid as usize & (CHUNK_SLOTS - 1)] }
    }
}

impl Drop for IndirectionArray {
    fn drop(&mut self) {
        for dir in self.chunks.iter() {
            let chunk = dir.load(Ordering::Acquire);
            if chunk.is_null() {
                continue;
            }
            let chunk = unsafe { Box::from_raw(chunk) };
            for slot in chunk.iter() {
                let head = slot.load(Ordering::Acquire);
                if !head.is_null() {
                    unsafe { free_chain(head) };
                }
            }
        }
    }
}

/// A table: a name, an indirection array, a RID allocator, and the
/// associated primary index.
pub struct Table {
    name: String,
    id: u64,
    live: AtomicBool,
    next_rid: AtomicU64,
    capacity: u64,
    ind: IndirectionArray,
    index: BLinkTree,
}

impl Table {
    pub(crate) fn new(name: String, id: u64, capacity: u64) -> Self {
        Table {
            name,
            id,
            live: AtomicBool::new(true),
            next_rid: AtomicU64::new(0),
            capacity,
            ind: IndirectionArray::with_capacity(capacity),
            index: BLinkTree::new(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn index(&self) -> &BLinkTree {
        &self.index
    }

    pub fn is_live(&self) -> bool {
        self.live.load(Ordering::Acquire)
    }

    pub(crate) fn close(&self) {
        self.live.store(false, Ordering::Release);
    }

    pub fn allocated_rids(&self) -> u64 {
        self.next_rid.load(Ordering::Acquire)
    }

    /// Returns the next unused RID. Concurrent callers receive distinct
    /// values; the covering indirection chunk exists (and the slot is empty)
    /// before this returns.
    pub fn allocate_rid(&self) -> Result<Rid, Error> {
        if !self.is_live() {
            return Err(Error::TableClosed(self.name.clone()));
        }
        let rid = self.next_rid.fetch_add(1, Ordering::AcqRel);
        if rid >= self.capacity {
            self.next_rid.fetch_sub(1, Ordering::AcqRel);
            return Err(Error::RidCapacity(self.name.clone(), self.capacity));
        }
        self.ind.ensure(rid);
        Ok(Rid(rid))
    }

    fn check_rid(&self, rid: Rid) -> Result<(), Error> {
        let hi = self.allocated_rids();
        if rid.0 >= hi {
            return Err(Error::RidRange(rid.0, hi));
        }
        Ok(())
    }

    /// Current head of the version chain for `rid`, or null for a
    /// never-written record.
    pub fn head_ptr(&self, rid: Rid) -> Result<*const VersionRecord, Error> {
        self.check_rid(rid)?;
        Ok(self.ind.slot(rid.0).load(Ordering::Acquire))
    }

    /// Reference flavor of [`Table::head_ptr`].
    ///
    /// # Safety
    /// As for [`VersionRecord::next`]: the chain must be protected from
    /// reclamation for the life of the reference.
    pub unsafe fn head(&self, rid: Rid) -> Result<Option<&VersionRecord>, Error> {
        Ok(self.head_ptr(rid)?.as_ref())
    }

    /// Atomically replaces the chain head: succeeds iff the slot still holds
    /// `expected` (null for an empty chain). On success the table owns
    /// `new`; on failure the caller retains ownership and nothing changed.
    ///
    /// # Safety
    /// `new` must point to a live record whose `next` equals `expected`.
    pub unsafe fn install(
        &self,
        rid: Rid,
        expected: *const VersionRecord,
        new: *const VersionRecord,
    ) -> Result<bool, Error> {
        self.check_rid(rid)?;
        debug_assert_eq!(
            unsafe { (*new).next },
            expected,
            "new head must link previous head"
        );
        Ok(self
            .ind
            .slot(rid.0)
            .compare_exchange(
                expected as *mut _,
                new as *mut _,
                Ordering::AcqRel,
                Ordering::Acquire,
            )
            .is_ok())
    }

    /// Replaces `victim` (an owner head) with `new`; the victim drops out
    /// of the chain. Succeeds iff `victim` is still the head. On success
    /// the caller must retire `victim`.
    ///
    /// # Safety
    /// Both pointers must be live records and `new.next` must equal
    /// `victim.next`.
    pub unsafe fn replace_head(
        &self,
        rid: Rid,
        victim: *const VersionRecord,
        new: *const VersionRecord,
    ) -> Result<bool, Error> {
        self.check_rid(rid)?;
        debug_assert_eq!(unsafe { (*new).next }, unsafe { (*victim).next });
        Ok(self
            .ind
            .slot(rid.0)
            .compare_exchange(
                victim as *mut _,
                new as *mut _,
                Ordering::AcqRel,
                Ordering::Acquire,
            )
            .is_ok())
    }

    /// Unlinks `victim` from the head of the chain, restoring its `next` as
    /// the head (abort rollback). Succeeds iff `victim` is still the head.
    /// On success the caller is responsible for retiring `victim`.
    ///
    /// # Safety
    /// `victim` must point to a live record.
    pub unsafe fn uninstall(&self, rid: Rid, victim: *const VersionRecord) -> Result<bool, Error> {
        self.check_rid(rid)?;
        let next = unsafe { (*victim).next };
        Ok(self
            .ind
            .slot(rid.0)
            .compare_exchange(
                victim as *mut _,
                next as *mut _,
                Ordering::AcqRel,
                Ordering::Acquire,
            )
            .is_ok())
    }

    /// Walks the chain of `rid` collecting `(stamp, tombstone, payload)` per
    /// version, newest first. Audit/debugging helper; call at quiescence.
    pub fn audit_chain(&self, rid: Rid) -> Vec<(VersionStamp, bool, Vec<u8>)> {
        let mut out = Vec::new();
        let mut p = self.head_ptr(rid).unwrap_or(std::ptr::null());
        while let Some(v) = unsafe { p.as_ref() } {
            out.push((v.stamp(), v.tombstone(), v.payload().to_vec()));
            p = v.next_ptr();
        }
        out
    }
}
