//! Raw index probing: a batch of suspendable searches interleaved by hand
//! versus driven to completion one at a time.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use corodb_core::index::{encode_u64_key, BLinkTree};
use corodb_core::sched::{drive, ExecEnv, ExecMode, Resumable};
use corodb_core::storage::Rid;

fn build_tree(n: u64) -> BLinkTree {
    let tree = BLinkTree::new();
    let env = ExecEnv::new(ExecMode::Sequential, None);
    for i in 0..n {
        drive(
            &env,
            tree.insert(
                &env,
                &encode_u64_key(i.wrapping_mul(0x9e3779b9) % n),
                Rid::new(i),
            ),
        );
    }
    tree
}

fn probe(c: &mut Criterion) {
    let n = 500_000u64;
    let tree = build_tree(n);
    let batch = 8usize;

    let mut group = c.benchmark_group("index_probe");
    group.sample_size(30);
    group.throughput(criterion::Throughput::Elements(batch as u64));

    group.bench_function(BenchmarkId::new("sequential", batch), |b| {
        let env = ExecEnv::new(ExecMode::SequentialPrefetch, None);
        let mut x = 1u64;
        b.iter(|| {
            let mut found = 0;
            for _ in 0..batch {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1);
                let key = encode_u64_key(x % n);
                if drive(&env, tree.search(&env, &key)).is_some() {
                    found += 1;
                }
            }
            black_box(found)
        })
    });

    group.bench_function(BenchmarkId::new("interleaved", batch), |b| {
        let env = ExecEnv::new(ExecMode::TwoLevel, None);
        let mut x = 1u64;
        b.iter(|| {
            let keys: Vec<[u8; 8]> = (0..batch)
                .map(|_| {
                    x = x.wrapping_mul(6364136223846793005).wrapping_add(1);
                    encode_u64_key(x % n)
                })
                .collect();
            let found = drive(&env, async {
                let mut ops: Vec<Resumable<'_, Option<Rid>>> = keys
                    .iter()
                    .map(|k| Resumable::new(tree.search(&env, k)))
                    .collect();
                loop {
                    let mut done = true;
                    for op in ops.iter_mut() {
                        if !op.is_done() && !op.resume() {
                            done = false;
                        }
                    }
                    if done {
                        break;
                    }
                }
                let mut found = 0;
                for mut op in ops {
                    if op.take_result().unwrap().is_some() {
                        found += 1;
                    }
                }
                found
            });
            black_box(found)
        })
    });

    group.finish();
}

criterion_group!(benches, probe);
criterion_main!(benches);
