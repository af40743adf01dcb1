//! Run reports and their text/csv/json serializations.

use std::fmt;
use std::str::FromStr;

use anyhow::{bail, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<ReportFormat> {
        match s {
            "text" => Ok(ReportFormat::Text),
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            _ => bail!("format must be text|csv|json"),
        }
    }
}

pub const CSV_HEADER: &str = "mode,workers,batch_size,theta,records,ops_per_txn,\
throughput_tps,mean_latency_us,p99_latency_us,abort_rate,resumes,suspensions";

/// Aggregated outcome of one workload run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: String,
    pub workers: usize,
    pub batch_size: usize,
    pub theta: f64,
    pub records: u64,
    pub ops_per_txn: usize,
    pub duration_secs: f64,

    pub attempted: u64,
    pub committed: u64,
    pub aborted: u64,
    pub failed: u64,
    pub throughput_tps: f64,
    pub mean_latency_us: f64,
    pub p99_latency_us: u64,
    pub max_latency_us: u64,
    pub abort_rate: f64,

    pub batches: u64,
    pub resumes: u64,
    pub suspensions: u64,
    pub inner_yields: u64,
    pub prefetches: u64,
    pub hops_min: u64,
    pub hops_max: u64,
    pub index_nodes_visited: u64,
    pub index_validation_retries: u64,
    pub chain_steps: u64,

    pub epoch_enters: u64,
    pub epochs_advanced: u64,
    pub bytes_retired: u64,
    pub bytes_reclaimed: u64,
    pub max_retire_residency: u64,

    pub log_extents: u64,
    pub log_bytes: u64,

    /// Engine-side counters over the run; must match committed/aborted.
    pub engine_commits: u64,
    pub engine_aborts: u64,
}

impl RunReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.3},{:.3},{},{:.6},{},{}",
            self.mode,
            self.workers,
            self.batch_size,
            self.theta,
            self.records,
            self.ops_per_txn,
            self.throughput_tps,
            self.mean_latency_us,
            self.p99_latency_us,
            self.abort_rate,
            self.resumes,
            self.suspensions
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn emit(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Json => self.to_json(),
            ReportFormat::Csv => format!("{CSV_HEADER}\n{}", self.csv_row()),
            ReportFormat::Text => self.to_string(),
        }
    }
}

impl fmt::Display for RunReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "mode {} | batch size {} | {} worker(s)",
            self.mode, self.batch_size, self.workers
        )?;
        writeln!(
            f,
            "workload: {} records, {} ops/txn, theta {}, {:.2}s",
            self.records, self.ops_per_txn, self.theta, self.duration_secs
        )?;
        writeln!(
            f,
            "txns: {} attempted, {} committed, {} aborted (rate {:.4}), {} failed",
            self.attempted, self.committed, self.aborted, self.abort_rate, self.failed
        )?;
        writeln!(
            f,
            "throughput: {:.0} txn/s | latency mean {:.1} us, p99 {} us, max {} us",
            self.throughput_tps, self.mean_latency_us, self.p99_latency_us, self.max_latency_us
        )?;
        writeln!(
            f,
            "scheduler: {} batches, {} resumes, {} suspensions ({} absorbed), hops {}..{}",
            self.batches,
            self.resumes,
            self.suspensions,
            self.inner_yields,
            self.hops_min,
            self.hops_max
        )?;
        writeln!(
            f,
            "index: {} nodes visited, {} validation retries | chain steps {} | prefetches {}",
            self.index_nodes_visited,
            self.index_validation_retries,
            self.chain_steps,
            self.prefetches
        )?;
        writeln!(
            f,
            "epochs: {} enters, {} advances, retired {} B, reclaimed {} B, peak residency {} B",
            self.epoch_enters,
            self.epochs_advanced,
            self.bytes_retired,
            self.bytes_reclaimed,
            self.max_retire_residency
        )?;
        write!(
            f,
            "log: {} extents, {} bytes",
            self.log_extents, self.log_bytes
        )
    }
}
