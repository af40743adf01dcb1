use thiserror::Error;

/// Engine-level errors: misuse of the API surface or exhausted resources.
///
/// Transaction conflicts are not errors; they surface as
/// [`crate::txn::Aborted`] outcomes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("table `{0}` already exists")]
    DuplicateTable(String),

    #[error("no such table `{0}`")]
    NoSuchTable(String),

    #[error("table `{0}` is closed")]
    TableClosed(String),

    #[error("table `{0}`: RID capacity {1} exhausted")]
    RidCapacity(String, u64),

    #[error("rid {0} out of range ({1} allocated)")]
    RidRange(u64, u64),

    #[error("batch slot {0} is busy")]
    SlotBusy(usize),

    #[error("batch is full")]
    BatchFull,

    #[error("worker capacity {0} exhausted")]
    WorkerCapacity(usize),

    #[error("invalid argument: {0}")]
    InvalidArg(&'static str),

    #[error("transaction log limit {0} bytes exceeded")]
    LogCapacity(usize),

    #[error("log decode: {0}")]
    LogDecode(&'static str),
}
