//! Database loading, workload execution across worker threads, and the
//! cross-mode verify harness.

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use corodb_core::engine::SinkConfig;
use corodb_core::sched::{
    self, drive, EnvCounters, ExecMode, SchedStats, SchedulerConfig, TaskFuture, TaskOutcome,
    TaskReport, TaskResult, TaskSource,
};
use corodb_core::txn::TxnHandle;
use corodb_core::{Engine, Table, Worker};

use crate::report::RunReport;
use crate::rng::SplitMix64;
use crate::workload::{encode_key, AccessApi, OpKind, WorkloadSpec, TABLE_NAME};
use crate::zipf::Zipfian;

/// Populates the workload table with `records` sequentially encoded keys
/// and seed-derived values through committed insert transactions, in
/// parallel ranges, then verifies the index count.
pub fn load_database(engine: &Arc<Engine>, spec: &WorkloadSpec) -> Result<Arc<Table>> {
    spec.validate()?;
    let table = engine.table_create(TABLE_NAME).context("workload table")?;
    let loaders = spec
        .workers
        .clamp(1, 8)
        .min(((spec.records / 50_000) + 1) as usize);
    let per = spec.records / loaders as u64;

    std::thread::scope(|s| -> Result<()> {
        let mut handles = Vec::new();
        for l in 0..loaders {
            let engine = Arc::clone(engine);
            let table = Arc::clone(&table);
            let start = l as u64 * per;
            let end = if l == loaders - 1 {
                spec.records
            } else {
                start + per
            };
            let (seed, key_len, val_len) = (spec.seed, spec.key_len, spec.val_len);
            handles.push(s.spawn(move || -> Result<()> {
                let w = Worker::new(
                    &engine,
                    l as u16,
                    ExecMode::Sequential,
                    1,
                    SinkConfig::Discard,
                )?;
                let mut key = Vec::with_capacity(key_len);
                let mut val = vec![0u8; val_len];
                let mut idx = start;
                while idx < end {
                    let chunk_end = (idx + 1024).min(end);
                    let txn = w.begin(0)?;
                    while idx < chunk_end {
                        encode_key(idx, key_len, &mut key);
                        SplitMix64::fork(seed, idx).fill(&mut val);
                        drive(w.env(), txn.insert(&table, &key, &val))
                            .map_err(|a| anyhow::anyhow!("load insert aborted: {:?}", a.reason))?;
                        idx += 1;
                    }
                    txn.commit()?;
                }
                w.finish();
                Ok(())
            }));
        }
        for h in handles {
            h.join().expect("loader thread")?;
        }
        Ok(())
    })?;

    let indexed = table.index().len() as u64;
    if indexed != spec.records {
        bail!(
            "index verification failed: {indexed} entries, expected {}",
            spec.records
        );
    }
    Ok(table)
}

/// Where worker log sinks write during a run.
#[derive(Clone, Debug)]
pub enum SinkMode {
    Discard,
    Memory,
    Dir(PathBuf),
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    /// Fixed transaction budget per worker; None runs for `spec.duration_secs`.
    pub txns_per_worker: Option<u64>,
    /// Collect one record per task (drives verify mode).
    pub collect_reports: bool,
    pub sink: SinkMode,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            txns_per_worker: None,
            collect_reports: false,
            sink: SinkMode::Discard,
        }
    }
}

pub struct RunOutcome {
    pub report: RunReport,
    /// Per-task reports (collect_reports), merged across workers.
    pub reports: Vec<TaskReport>,
    /// Per-worker memory-sink contents (SinkMode::Memory).
    pub sink_dumps: Vec<Vec<u8>>,
}

struct WorkerOut {
    stats: SchedStats,
    env: EnvCounters,
    epoch: corodb_core::epoch::EpochStats,
    sink_extents: u64,
    sink_bytes: u64,
    sink_monotonic: bool,
    sink_dump: Option<Vec<u8>>,
}

/// Runs `spec` against a loaded engine: one scheduler per worker thread,
/// aborted transactions counted, and retried only when the workload asks.
pub fn run_workload(engine: &Arc<Engine>, spec: &WorkloadSpec) -> Result<RunReport> {
    Ok(execute(engine, spec, RunOptions::default())?.report)
}

pub fn execute(engine: &Arc<Engine>, spec: &WorkloadSpec, opts: RunOptions) -> Result<RunOutcome> {
    spec.validate()?;
    let table = engine.table(TABLE_NAME)?;
    let zipf = Arc::new(Zipfian::new(spec.records, spec.theta)?);
    let insert_seq = Arc::new(AtomicU64::new(spec.records));
    let stop = Arc::new(AtomicBool::new(false));

    let commits_before = engine.commit_count();
    let aborts_before = engine.abort_count();

    let mut outs: Vec<WorkerOut> = Vec::with_capacity(spec.workers);
    std::thread::scope(|s| -> Result<()> {
        let mut handles = Vec::new();
        for wid in 0..spec.workers {
            let engine = Arc::clone(engine);
            let table = Arc::clone(&table);
            let zipf = Arc::clone(&zipf);
            let insert_seq = Arc::clone(&insert_seq);
            let stop = Arc::clone(&stop);
            let spec = spec.clone();
            let opts = opts.clone();
            handles.push(s.spawn(move || -> Result<WorkerOut> {
                worker_thread(&engine, &table, &spec, &opts, wid, zipf, insert_seq, stop)
            }));
        }
        if opts.txns_per_worker.is_none() {
            std::thread::sleep(Duration::from_secs_f64(spec.duration_secs));
            stop.store(true, Ordering::SeqCst);
        }
        for h in handles {
            outs.push(h.join().expect("worker thread")?);
        }
        Ok(())
    })?;

    let mut stats = SchedStats::default();
    let mut env = EnvCounters::default();
    let mut epoch_enters = 0;
    let mut retired = 0;
    let mut reclaimed = 0;
    let mut residency = 0u64;
    let mut log_extents = 0;
    let mut log_bytes = 0;
    let mut reports = Vec::new();
    let mut sink_dumps = Vec::new();
    for mut o in outs {
        env.suspensions += o.env.suspensions;
        env.prefetches += o.env.prefetches;
        env.inner_yields += o.env.inner_yields;
        env.index_nodes_visited += o.env.index_nodes_visited;
        env.index_validation_retries += o.env.index_validation_retries;
        env.chain_steps += o.env.chain_steps;
        epoch_enters += o.epoch.enters;
        retired += o.epoch.retired_bytes;
        reclaimed += o.epoch.reclaimed_bytes;
        residency = residency.max(o.epoch.max_residency_bytes);
        log_extents += o.sink_extents;
        log_bytes += o.sink_bytes;
        if !o.sink_monotonic {
            bail!("sink sealed out of commit-stamp order");
        }
        reports.append(&mut o.stats.reports);
        if let Some(d) = o.sink_dump.take() {
            sink_dumps.push(d);
        }
        stats.merge(&o.stats);
    }

    let wall = stats.wall.as_secs_f64().max(1e-9);
    let attempted = stats.committed + stats.aborted + stats.failed;
    let report = RunReport {
        mode: spec.mode.label().to_string(),
        workers: spec.workers,
        batch_size: spec.batch_size,
        theta: spec.theta,
        records: spec.records,
        ops_per_txn: spec.ops_per_txn,
        duration_secs: wall,
        attempted,
        committed: stats.committed,
        aborted: stats.aborted,
        failed: stats.failed,
        throughput_tps: stats.committed as f64 / wall,
        mean_latency_us: stats.latency.mean(),
        p99_latency_us: stats.latency.quantile(0.99),
        max_latency_us: stats.latency.max(),
        abort_rate: if attempted == 0 {
            0.0
        } else {
            stats.aborted as f64 / attempted as f64
        },
        batches: stats.batches,
        resumes: stats.resumes,
        suspensions: stats.suspensions,
        inner_yields: env.inner_yields,
        prefetches: env.prefetches,
        hops_min: if stats.suspensions == 0 {
            0
        } else {
            stats.hops_min
        },
        hops_max: stats.hops_max,
        index_nodes_visited: env.index_nodes_visited,
        index_validation_retries: env.index_validation_retries,
        chain_steps: env.chain_steps,
        epoch_enters,
        epochs_advanced: engine.epoch_manager().epochs_advanced(),
        bytes_retired: retired,
        bytes_reclaimed: reclaimed,
        max_retire_residency: residency,
        log_extents,
        log_bytes,
        engine_commits: engine.commit_count() - commits_before,
        engine_aborts: engine.abort_count() - aborts_before,
    };
    Ok(RunOutcome {
        report,
        reports,
        sink_dumps,
    })
}

#[allow(clippy::too_many_arguments)]
fn worker_thread(
    engine: &Arc<Engine>,
    table: &Arc<Table>,
    spec: &WorkloadSpec,
    opts: &RunOptions,
    wid: usize,
    zipf: Arc<Zipfian>,
    insert_seq: Arc<AtomicU64>,
    stop: Arc<AtomicBool>,
) -> Result<WorkerOut> {
    maybe_pin(wid);
    let sink = match &opts.sink {
        SinkMode::Discard => SinkConfig::Discard,
        SinkMode::Memory => SinkConfig::Memory,
        SinkMode::Dir(d) => {
            std::fs::create_dir_all(d).context("log dir")?;
            SinkConfig::Dir(d)
        }
    };
    let worker = Worker::new(engine, wid as u16, spec.mode, spec.batch_size, sink)?;
    let mut source = GenSource {
        worker: worker.clone(),
        table: Arc::clone(table),
        spec: spec.clone(),
        zipf,
        insert_seq,
        wid: wid as u64,
        produced: 0,
        budget: opts.txns_per_worker,
    };
    let config = SchedulerConfig {
        batch_size: spec.batch_size,
        mode: spec.mode,
        collect_reports: opts.collect_reports,
    };
    let mut hooks = worker.epoch_hooks();
    let stats = sched::run(config, worker.env(), &mut source, &mut hooks, &|| {
        stop.load(Ordering::Relaxed)
    })?;
    worker.finish();
    Ok(WorkerOut {
        stats,
        env: worker.env().snapshot(),
        epoch: worker.epoch_stats(),
        sink_extents: worker.sink_extents(),
        sink_bytes: worker.sink_bytes(),
        sink_monotonic: worker.sink_ts_monotonic(),
        sink_dump: worker.sink_memory(),
    })
}

/// Worker-ids are folded into the task id so ids stay unique across
/// workers while remaining the admission sequence for one worker.
const WORKER_SEQ_STRIDE: u64 = 1 << 40;

struct GenSource {
    worker: Worker,
    table: Arc<Table>,
    spec: WorkloadSpec,
    zipf: Arc<Zipfian>,
    insert_seq: Arc<AtomicU64>,
    wid: u64,
    produced: u64,
    budget: Option<u64>,
}

impl TaskSource for GenSource {
    fn next_task(&mut self, slot: usize) -> Option<TaskFuture> {
        if let Some(b) = self.budget {
            if self.produced >= b {
                return None;
            }
        }
        let seq = self.produced;
        self.produced += 1;
        let id = self.wid * WORKER_SEQ_STRIDE + seq;
        let worker = self.worker.clone();
        let table = Arc::clone(&self.table);
        let spec = self.spec.clone();
        let zipf = Arc::clone(&self.zipf);
        let insert_seq = Arc::clone(&self.insert_seq);
        Some(Box::pin(async move {
            loop {
                let mut rng = SplitMix64::fork(spec.seed, id);
                let txn = match worker.begin(slot) {
                    Ok(t) => t,
                    Err(_) => {
                        return TaskResult {
                            outcome: TaskOutcome::Failed,
                            id,
                            checksum: 0,
                        }
                    }
                };
                match transaction_body(&txn, &table, &spec, &zipf, &insert_seq, &mut rng).await {
                    Ok(digest) => {
                        txn.commit().expect("active transaction commits");
                        return TaskResult {
                            outcome: TaskOutcome::Committed,
                            id,
                            checksum: digest,
                        };
                    }
                    Err(_) if spec.retry_aborts => continue,
                    Err(_) => {
                        return TaskResult {
                            outcome: TaskOutcome::Aborted,
                            id,
                            checksum: 0,
                        }
                    }
                }
            }
        }))
    }
}

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn absorb(digest: &mut u64, bytes: &[u8]) {
    for &b in bytes {
        *digest = (*digest ^ u64::from(b)).wrapping_mul(FNV_PRIME);
    }
}

fn absorb_opt(digest: &mut u64, v: Option<&[u8]>) {
    match v {
        None => absorb(digest, &[0]),
        Some(bytes) => {
            absorb(digest, &[1]);
            absorb(digest, bytes);
        }
    }
}

/// One transaction body: `ops_per_txn` operations drawn from
/// the mix with Zipfian key choice. Returns the result digest; an engine
/// abort surfaces as Err (the context has already been rolled back).
async fn transaction_body(
    txn: &TxnHandle,
    table: &Arc<Table>,
    spec: &WorkloadSpec,
    zipf: &Zipfian,
    insert_seq: &AtomicU64,
    rng: &mut SplitMix64,
) -> Result<u64, corodb_core::Aborted> {
    let mut digest = FNV_OFFSET;
    let mut key = Vec::with_capacity(spec.key_len);
    let mut val = vec![0u8; spec.val_len];

    // Draw the plan up front: deterministic for this transaction id no
    // matter how execution interleaves.
    let mut plan: Vec<(OpKind, u64)> = Vec::with_capacity(spec.ops_per_txn);
    for _ in 0..spec.ops_per_txn {
        let op = spec.mix.pick(rng.next_f64());
        let idx = match op {
            OpKind::Insert => insert_seq.fetch_add(1, Ordering::Relaxed),
            _ => zipf.next(rng),
        };
        plan.push((op, idx));
    }

    if spec.api == AccessApi::MultiGet {
        // Intra-transaction interleaving: all point reads go through one
        // multi-get; remaining ops run afterwards in plan order.
        let read_keys: Vec<Vec<u8>> = plan
            .iter()
            .filter(|(op, _)| *op == OpKind::Read)
            .map(|(_, idx)| {
                encode_key(*idx, spec.key_len, &mut key);
                key.clone()
            })
            .collect();
        if !read_keys.is_empty() {
            for v in txn.multi_get(table, &read_keys).await {
                absorb_opt(&mut digest, v.as_deref());
            }
        }
    }

    for (op, idx) in &plan {
        encode_key(*idx, spec.key_len, &mut key);
        match op {
            OpKind::Read => {
                if spec.api == AccessApi::MultiGet {
                    continue; // already served by multi_get
                }
                let v = txn.read(table, &key).await;
                absorb_opt(&mut digest, v.as_deref());
            }
            OpKind::Update => {
                rng.fill(&mut val);
                txn.update(table, &key, &val).await?;
            }
            OpKind::Rmw => {
                let v = txn.read(table, &key).await;
                absorb_opt(&mut digest, v.as_deref());
                rng.fill(&mut val);
                txn.update(table, &key, &val).await?;
            }
            OpKind::Scan => {
                let rows = txn
                    .scan(table, &key, spec.scan_len)
                    .await
                    .expect("scan_len validated positive");
                absorb(&mut digest, &(rows.len() as u64).to_le_bytes());
                for (k, v) in rows {
                    absorb(&mut digest, &k);
                    absorb(&mut digest, &v);
                }
            }
            OpKind::Insert => {
                rng.fill(&mut val);
                txn.insert(table, &key, &val).await?;
            }
        }
    }
    Ok(digest)
}

/// Verify mode: a single-worker read-only workload from a fixed seed must
/// produce byte-identical per-transaction results across all four
/// execution modes and batch sizes {1,2,4,8,16}.
pub struct VerifyReport {
    pub txns: u64,
    pub configs: Vec<(String, usize, bool)>,
    pub ok: bool,
}

pub fn verify_across_modes(
    engine: &Arc<Engine>,
    spec: &WorkloadSpec,
    txns: u64,
) -> Result<VerifyReport> {
    if !spec.mix.read_only() {
        bail!("verify mode requires a read-only mix (writes would diverge the database)");
    }
    let batches = [1usize, 2, 4, 8, 16];
    let reference = digest_run(engine, spec, ExecMode::Sequential, 1, txns)?;
    let mut configs = Vec::new();
    let mut ok = true;
    for mode in ExecMode::ALL {
        for batch in batches {
            let got = digest_run(engine, spec, mode, batch, txns)?;
            let same = got == reference;
            ok &= same;
            configs.push((mode.label().to_string(), batch, same));
        }
    }
    Ok(VerifyReport { txns, configs, ok })
}

/// Digest stream of a fixed-count single-worker run, in admission order.
pub fn digest_run(
    engine: &Arc<Engine>,
    spec: &WorkloadSpec,
    mode: ExecMode,
    batch: usize,
    txns: u64,
) -> Result<Vec<u64>> {
    let mut spec = spec.clone();
    spec.workers = 1;
    spec.mode = mode;
    spec.batch_size = batch;
    let out = execute(
        engine,
        &spec,
        RunOptions {
            txns_per_worker: Some(txns),
            collect_reports: true,
            sink: SinkMode::Discard,
        },
    )?;
    let mut reports = out.reports;
    reports.sort_by_key(|r| r.id);
    Ok(reports.iter().map(|r| r.checksum).collect())
}

fn maybe_pin(wid: usize) {
    if std::env::var("CORODB_NUMA_PIN").ok().as_deref() != Some("1") {
        return;
    }
    #[cfg(target_os = "linux")]
    unsafe {
        let cores = std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1);
        let core = wid % cores;
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_ZERO(&mut set);
        libc::CPU_SET(core, &mut set);
        libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set);
    }
    #[cfg(not(target_os = "linux"))]
    {
        let _ = wid;
    }
}
