//! Workload driver for the corodb engine: YCSB-style specs, a bounded
//! Zipfian generator, a multi-threaded runner, and report emitters.

pub mod report;
pub mod rng;
pub mod runner;
pub mod workload;
pub mod zipf;

pub use report::{ReportFormat, RunReport, CSV_HEADER};
pub use runner::{execute, load_database, run_workload, verify_across_modes, RunOptions, SinkMode};
pub use workload::{encode_key, AccessApi, Mix, OpKind, WorkloadSpec, TABLE_NAME};
pub use zipf::Zipfian;
