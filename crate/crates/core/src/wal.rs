//! Transaction-local log buffers with asynchronous commit.
//!
//! Each batch slot owns a [`LogBuffer`]; a transaction appends redo records
//! for its writes as it goes (reads are not logged). At commit the buffer is
//! sealed: the commit stamp is written into every record and the extent is
//! handed to the worker's [`LogSink`] without waiting for persistence.
//! Aborted transactions discard the buffer and contribute zero sink bytes.
//!
//! Record wire format (little-endian, bit-exact for the audit tests):
//! `u32 length | u8 kind | u64 table | u64 rid | u64 commit_ts | payload`,
//! where `length` counts everything after the length field itself.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::Error;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
#[repr(u8)]
pub enum LogKind {
    Insert = 0,
    Update = 1,
    Delete = 2,
}

impl TryFrom<u8> for LogKind {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self, Error> {
        match v {
            0 => Ok(LogKind::Insert),
            1 => Ok(LogKind::Update),
            2 => Ok(LogKind::Delete),
            _ => Err(Error::LogDecode("unknown record kind")),
        }
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct LogRecord {
    pub table: u64,
    pub rid: u64,
    pub kind: LogKind,
    pub payload: Box<[u8]>,
    pub commit_ts: u64,
}

const RECORD_HEADER: usize = 1 + 8 + 8 + 8;

impl LogRecord {
    pub fn encoded_len(&self) -> usize {
        4 + RECORD_HEADER + self.payload.len()
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&((RECORD_HEADER + self.payload.len()) as u32).to_le_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&self.table.to_le_bytes());
        out.extend_from_slice(&self.rid.to_le_bytes());
        out.extend_from_slice(&self.commit_ts.to_le_bytes());
        out.extend_from_slice(&self.payload);
    }
}

/// Decodes a concatenated record stream (the full contents of a sink).
pub fn decode(mut bytes: &[u8]) -> Result<Vec<LogRecord>, Error> {
    let mut out = Vec::new();
    while !bytes.is_empty() {
        if bytes.len() < 4 {
            return Err(Error::LogDecode("truncated length prefix"));
        }
        let len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        bytes = &bytes[4..];
        if len < RECORD_HEADER || bytes.len() < len {
            return Err(Error::LogDecode("truncated record"));
        }
        let kind = LogKind::try_from(bytes[0])?;
        let table = u64::from_le_bytes(bytes[1..9].try_into().unwrap());
        let rid = u64::from_le_bytes(bytes[9..17].try_into().unwrap());
        let commit_ts = u64::from_le_bytes(bytes[17..25].try_into().unwrap());
        let payload: Box<[u8]> = bytes[25..len].into();
        out.push(LogRecord {
            table,
            rid,
            kind,
            payload,
            commit_ts,
        });
        bytes = &bytes[len..];
    }
    Ok(out)
}

/// Slot-owned append buffer. Appended only by the owning transaction;
/// sealed exactly once per commit.
#[derive(Debug)]
pub struct LogBuffer {
    records: Vec<LogRecord>,
    bytes: usize,
    limit: usize,
}

impl LogBuffer {
    pub fn new(limit: usize) -> Self {
        LogBuffer {
            records: Vec::new(),
            bytes: 0,
            limit,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn bytes(&self) -> usize {
        self.bytes
    }

    pub fn append(
        &mut self,
        table: u64,
        rid: u64,
        kind: LogKind,
        payload: &[u8],
    ) -> Result<(), Error> {
        let rec = LogRecord {
            table,
            rid,
            kind,
            payload: payload.into(),
            commit_ts: 0,
        };
        if self.bytes + rec.encoded_len() > self.limit {
            return Err(Error::LogCapacity(self.limit));
        }
        self.bytes += rec.encoded_len();
        self.records.push(rec);
        Ok(())
    }

    /// Replaces the record for `(table, rid)` in place, or appends. Used
    /// when a transaction writes the same record twice: the log keeps one
    /// record per installed version.
    pub fn upsert(
        &mut self,
        table: u64,
        rid: u64,
        kind: LogKind,
        payload: &[u8],
    ) -> Result<(), Error> {
        if let Some(rec) = self
            .records
            .iter_mut()
            .find(|r| r.table == table && r.rid == rid)
        {
            let old_len = rec.encoded_len();
            let new_payload: Box<[u8]> = payload.into();
            let new_len = old_len - rec.payload.len() + new_payload.len();
            if self.bytes - old_len + new_len > self.limit {
                return Err(Error::LogCapacity(self.limit));
            }
            self.bytes = self.bytes - old_len + new_len;
            rec.kind = kind;
            rec.payload = new_payload;
            return Ok(());
        }
        self.append(table, rid, kind, payload)
    }

    /// Discards all records (abort, or after seal); capacity is kept.
    pub fn clear(&mut self) {
        self.records.clear();
        self.bytes = 0;
    }
}

/// Where a sink puts sealed bytes.
pub enum SinkStore {
    /// Accumulate in memory (audit tests, verify mode).
    Memory(Vec<u8>),
    /// Stream to `<dir>/log-worker-<id>.bin`.
    File(BufWriter<File>),
    /// Count only; drop the bytes (long benchmark runs without --log-dir).
    Discard,
}

/// Per-worker append-only record stream. Single-writer: only the owning
/// worker seals into it. Extents appear in commit-stamp order because a
/// commit never suspends between stamp acquisition and seal.
pub struct LogSink {
    worker: u16,
    store: SinkStore,
    extents: u64,
    bytes: u64,
    last_ts: Option<u64>,
    monotonic: bool,
    scratch: Vec<u8>,
}

impl LogSink {
    pub fn memory(worker: u16) -> Self {
        Self::with_store(worker, SinkStore::Memory(Vec::new()))
    }

    pub fn discard(worker: u16) -> Self {
        Self::with_store(worker, SinkStore::Discard)
    }

    /// Opens `<dir>/log-worker-<id>.bin` for append-only streaming.
    pub fn file(worker: u16, dir: &Path) -> std::io::Result<Self> {
        let path = dir.join(format!("log-worker-{worker}.bin"));
        let f = File::create(path)?;
        Ok(Self::with_store(worker, SinkStore::File(BufWriter::new(f))))
    }

    fn with_store(worker: u16, store: SinkStore) -> Self {
        LogSink {
            worker,
            store,
            extents: 0,
            bytes: 0,
            last_ts: None,
            monotonic: true,
            scratch: Vec::new(),
        }
    }

    pub fn worker(&self) -> u16 {
        self.worker
    }

    /// Stamps every buffered record with `commit_ts`, appends the encoded
    /// extent, and clears the buffer. Returns the extent's byte length.
    /// Control returns without awaiting persistence (asynchronous commit).
    pub fn seal(&mut self, buf: &mut LogBuffer, commit_ts: u64) -> u64 {
        self.scratch.clear();
        for rec in &mut buf.records {
            rec.commit_ts = commit_ts;
            rec.encode_into(&mut self.scratch);
        }
        match &mut self.store {
            SinkStore::Memory(v) => v.extend_from_slice(&self.scratch),
            SinkStore::File(w) => {
                // Asynchronous commit: buffered write, no flush, no fsync.
                let _ = w.write_all(&self.scratch);
            }
            SinkStore::Discard => {}
        }
        let n = self.scratch.len() as u64;
        self.bytes += n;
        self.extents += 1;
        if let Some(prev) = self.last_ts {
            if commit_ts < prev {
                self.monotonic = false;
            }
        }
        self.last_ts = Some(commit_ts);
        buf.clear();
        n
    }

    pub fn extents(&self) -> u64 {
        self.extents
    }

    pub fn bytes(&self) -> u64 {
        self.bytes
    }

    /// Whether every sealed extent carried a commit stamp >= its
    /// predecessor's.
    pub fn ts_monotonic(&self) -> bool {
        self.monotonic
    }

    /// Memory-store contents, for audits.
    pub fn memory_bytes(&self) -> Option<&[u8]> {
        match &self.store {
            SinkStore::Memory(v) => Some(v),
            _ => None,
        }
    }

    /// Flushes file-backed stores (end of run).
    pub fn finish(&mut self) {
        if let SinkStore::File(w) = &mut self.store {
            let _ = w.flush();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_roundtrip() {
        let recs = vec![
            LogRecord {
                table: 1,
                rid: 42,
                kind: LogKind::Insert,
                payload: b"abc"[..].into(),
                commit_ts: 9,
            },
            LogRecord {
                table: 1,
                rid: 43,
                kind: LogKind::Update,
                payload: Box::default(),
                commit_ts: 10,
            },
            LogRecord {
                table: 2,
                rid: 0,
                kind: LogKind::Delete,
                payload: b"\x00\xff"[..].into(),
                commit_ts: 11,
            },
        ];
        let mut bytes = Vec::new();
        for r in &recs {
            r.encode_into(&mut bytes);
        }
        assert_eq!(decode(&bytes).unwrap(), recs);
    }

    #[test]
    fn exact_wire_layout() {
        let r = LogRecord {
            table: 0x0102,
            rid: 0x0304,
            kind: LogKind::Update,
            payload: b"hi"[..].into(),
            commit_ts: 0x0506,
        };
        let mut bytes = Vec::new();
        r.encode_into(&mut bytes);
        let mut want = Vec::new();
        want.extend_from_slice(&27u32.to_le_bytes()); // 1+8+8+8+2
        want.push(1u8);
        want.extend_from_slice(&0x0102u64.to_le_bytes());
        want.extend_from_slice(&0x0304u64.to_le_bytes());
        want.extend_from_slice(&0x0506u64.to_le_bytes());
        want.extend_from_slice(b"hi");
        assert_eq!(bytes, want);
    }

    #[test]
    fn decode_rejects_truncation_and_bad_kind() {
        let r = LogRecord {
            table: 0,
            rid: 0,
            kind: LogKind::Insert,
            payload: b"x"[..].into(),
            commit_ts: 1,
        };
        let mut bytes = Vec::new();
        r.encode_into(&mut bytes);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(&bytes[..3]).is_err());
        let mut bad = bytes.clone();
        bad[4] = 77;
        assert!(decode(&bad).is_err());
    }

    #[test]
    fn append_order_and_clear() {
        let mut buf = LogBuffer::new(1 << 20);
        buf.append(1, 1, LogKind::Update, b"a").unwrap();
        buf.append(1, 2, LogKind::Update, b"b").unwrap();
        buf.append(1, 3, LogKind::Delete, b"").unwrap();
        assert_eq!(buf.len(), 3);
        assert_eq!(buf.records[0].payload.as_ref(), b"a");
        buf.clear();
        assert!(buf.is_empty());
        assert_eq!(buf.bytes(), 0);
    }

    #[test]
    fn capacity_limit_enforced() {
        let mut buf = LogBuffer::new(64);
        assert!(buf.append(1, 1, LogKind::Update, &[0u8; 16]).is_ok());
        assert!(matches!(
            buf.append(1, 2, LogKind::Update, &[0u8; 64]),
            Err(Error::LogCapacity(64))
        ));
    }

    #[test]
    fn upsert_replaces_in_place() {
        let mut buf = LogBuffer::new(1 << 20);
        buf.append(1, 7, LogKind::Insert, b"v1").unwrap();
        buf.upsert(1, 7, LogKind::Insert, b"v2-longer").unwrap();
        buf.upsert(1, 8, LogKind::Update, b"w").unwrap();
        assert_eq!(buf.len(), 2);
        assert_eq!(buf.records[0].payload.as_ref(), b"v2-longer");
        assert_eq!(buf.records[0].kind, LogKind::Insert);
    }

    #[test]
    fn seal_stamps_and_sequences() {
        let mut sink = LogSink::memory(0);
        let mut buf = LogBuffer::new(1 << 20);

        buf.append(1, 1, LogKind::Update, b"a").unwrap();
        buf.append(1, 2, LogKind::Update, b"b").unwrap();
        sink.seal(&mut buf, 100);
        assert!(buf.is_empty());

        // empty seal: zero-length extent, still sequenced
        let n = sink.seal(&mut buf, 101);
        assert_eq!(n, 0);
        assert_eq!(sink.extents(), 2);
        assert!(sink.ts_monotonic());

        buf.append(2, 5, LogKind::Delete, b"").unwrap();
        sink.seal(&mut buf, 102);

        let recs = decode(sink.memory_bytes().unwrap()).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[0].commit_ts, 100);
        assert_eq!(recs[1].commit_ts, 100);
        assert_eq!(recs[2].commit_ts, 102);
    }

    #[test]
    fn out_of_order_seal_is_detected() {
        let mut sink = LogSink::memory(0);
        let mut buf = LogBuffer::new(1 << 20);
        sink.seal(&mut buf, 10);
        sink.seal(&mut buf, 9);
        assert!(!sink.ts_monotonic());
    }

    #[test]
    fn file_sink_writes_decodable_stream() {
        let dir = std::env::temp_dir().join(format!("corodb-wal-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        {
            let mut sink = LogSink::file(3, &dir).unwrap();
            let mut buf = LogBuffer::new(1 << 20);
            buf.append(1, 1, LogKind::Insert, b"hello").unwrap();
            sink.seal(&mut buf, 7);
            sink.finish();
        }
        let bytes = std::fs::read(dir.join("log-worker-3.bin")).unwrap();
        let recs = decode(&bytes).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].payload.as_ref(), b"hello");
        std::fs::remove_dir_all(&dir).ok();
    }
}
