use std::path::PathBuf;
use std::str::FromStr;

use anyhow::Result;
use clap::Parser;

use corodb_cli::report::ReportFormat;
use corodb_cli::runner::{self, RunOptions, SinkMode};
use corodb_cli::workload::{AccessApi, Mix, WorkloadSpec};
use corodb_core::{Engine, EngineConfig, ExecMode};

/// YCSB-style workload driver comparing execution modes of the corodb
/// engine: sequential, sequential+prefetch, and interleaved (two-level or
/// fully-nested suspendable operations).
#[derive(Parser, Debug)]
#[command(name = "corodb-bench", version, about)]
struct Cli {
    /// Records loaded before the run
    #[arg(long, default_value_t = 10_000_000)]
    records: u64,

    /// Key length in bytes (numeric keys are big-endian encoded)
    #[arg(long, default_value_t = 8)]
    key_len: usize,

    /// Value length in bytes
    #[arg(long, default_value_t = 8)]
    val_len: usize,

    /// Operations per transaction
    #[arg(long, default_value_t = 10)]
    ops_per_txn: usize,

    /// Operation mix, e.g. read=0.8,rmw=0.2 (fractions sum to 1)
    #[arg(long, default_value = "read=1.0")]
    mix: String,

    /// Entries returned per scan operation
    #[arg(long, default_value_t = 10)]
    scan_len: usize,

    /// Zipfian skew in [0,1); 0 is uniform
    #[arg(long, default_value_t = 0.0)]
    theta: f64,

    /// Worker threads (one scheduler each)
    #[arg(long, default_value_t = 1)]
    workers: usize,

    /// Execution mode: seq|seq-prefetch|two-level|fully-nested
    #[arg(long, default_value = "two-level")]
    mode: String,

    /// Record access API: single|multi-get
    #[arg(long, default_value = "single")]
    api: String,

    /// Transactions interleaved per worker
    #[arg(long, default_value_t = 8)]
    batch_size: usize,

    /// Run duration in seconds
    #[arg(long, default_value_t = 30.0)]
    duration: f64,

    /// Workload RNG seed
    #[arg(long, default_value_t = 42)]
    seed: u64,

    /// Report format: text|csv|json
    #[arg(long, default_value = "text")]
    format: String,

    /// Verify mode: single worker, read-only; compares per-transaction
    /// results across all modes and batch sizes {1,2,4,8,16}
    #[arg(long)]
    verify: bool,

    /// Transactions per configuration in verify mode
    #[arg(long, default_value_t = 10_000)]
    verify_txns: u64,

    /// Write per-worker log files (log-worker-<id>.bin) into this directory
    #[arg(long)]
    log_dir: Option<PathBuf>,

    /// Re-run aborted transactions until they commit
    #[arg(long)]
    retry_aborts: bool,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let spec = WorkloadSpec {
        records: cli.records,
        key_len: cli.key_len,
        val_len: cli.val_len,
        ops_per_txn: cli.ops_per_txn,
        mix: Mix::from_str(&cli.mix)?,
        scan_len: cli.scan_len,
        theta: cli.theta,
        api: AccessApi::from_str(&cli.api)?,
        duration_secs: cli.duration,
        workers: cli.workers,
        mode: ExecMode::from_str(&cli.mode)?,
        batch_size: cli.batch_size,
        seed: cli.seed,
        retry_aborts: cli.retry_aborts,
    };
    spec.validate()?;
    let format = ReportFormat::from_str(&cli.format)?;

    let engine = Engine::new(EngineConfig::default());
    eprintln!(
        "loading {} records ({} B keys, {} B values)...",
        spec.records, spec.key_len, spec.val_len
    );
    let started = std::time::Instant::now();
    runner::load_database(&engine, &spec)?;
    eprintln!("loaded in {:.1}s", started.elapsed().as_secs_f64());

    if cli.verify {
        let report = runner::verify_across_modes(&engine, &spec, cli.verify_txns)?;
        for (mode, batch, same) in &report.configs {
            println!(
                "verify {mode} batch={batch}: {}",
                if *same { "identical" } else { "MISMATCH" }
            );
        }
        if report.ok {
            println!(
                "VERIFY OK: {} txns identical across all modes and batch sizes",
                report.txns
            );
            return Ok(());
        }
        anyhow::bail!("VERIFY FAILED");
    }

    let sink = match &cli.log_dir {
        Some(d) => SinkMode::Dir(d.clone()),
        None => SinkMode::Discard,
    };
    eprintln!(
        "running {} for {:.0}s: {} worker(s), batch {}, mix {}...",
        spec.mode, spec.duration_secs, spec.workers, spec.batch_size, spec.mix
    );
    let outcome = runner::execute(
        &engine,
        &spec,
        RunOptions {
            txns_per_worker: None,
            collect_reports: false,
            sink,
        },
    )?;
    println!("{}", outcome.report.emit(format));
    Ok(())
}
