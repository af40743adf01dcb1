//! Shared fixtures for the criterion benches.

use std::sync::Arc;

use corodb_cli::workload::WorkloadSpec;
use corodb_cli::{load_database, Mix};
use corodb_core::{Engine, EngineConfig, ExecMode};

/// Loads a read-only benchmark spec at the given scale.
pub fn bench_spec(records: u64, mode: ExecMode, batch: usize) -> WorkloadSpec {
    WorkloadSpec {
        records,
        mix: Mix::default(),
        mode,
        batch_size: batch,
        workers: 1,
        seed: 7,
        ..WorkloadSpec::default()
    }
}

pub fn engine_with(records: u64) -> Arc<Engine> {
    let engine = Engine::new(EngineConfig::default());
    let spec = bench_spec(records, ExecMode::Sequential, 1);
    load_database(&engine, &spec).expect("bench load");
    engine
}
