//! CoroDB: a main-memory, multi-version key-value transaction engine that
//! hides memory stalls by interleaving batches of transactions per worker.
//!
//! Every record access (index traversal, version-chain walk) is a suspendable
//! operation: before dereferencing a pointer that may miss the cache, it
//! issues a software prefetch for the target and yields. A per-worker
//! round-robin scheduler resumes the next transaction in the batch, so the
//! prefetch completes while other work makes progress. Applications keep the
//! conventional single-key interfaces (`read`/`update`/`insert`/`delete`/
//! `scan`); batching happens across transactions inside the engine.
//!
//! Layout:
//! - [`storage`]: tables, logical record ids, indirection arrays, version chains
//! - [`index`]: ordered key→RID B-link tree with prefetch-then-suspend traversal
//! - [`sched`]: suspension machinery and the per-worker batch scheduler
//! - [`epoch`]: batch-scoped epoch-based memory reclamation
//! - [`wal`]: transaction-local log buffers with asynchronous commit
//! - [`txn`]: snapshot-isolation transactions over the above
//! - [`engine`]: assembly — table registry, clock, worker handles

pub mod engine;
pub mod epoch;
pub mod index;
pub mod sched;
pub mod storage;
pub mod txn;
pub mod wal;

mod error;

pub use engine::{Engine, EngineConfig, Worker};
pub use error::Error;
pub use index::BLinkTree;
pub use sched::{ExecEnv, ExecMode, SchedStats, SchedulerConfig};
pub use storage::{Rid, Table, VersionRecord, VersionStamp};
pub use txn::{AbortReason, Aborted, GlobalClock, TxnHandle, TxnState};
