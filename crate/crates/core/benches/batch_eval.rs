use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use alcor_core::exec::Exec;
use alcor_core::experiment::{ura_bench, RunConfig};

fn bench_config(n: usize) -> RunConfig {
    RunConfig::from_json(&format!(
        r#"{{"seed": 1, "channel": {{"kind": "rayleigh", "n_users": {n}}},
            "bench": {{"kappas": [0.5, 1.0], "draws": 64, "backends": ["wmmse"]}}}}"#
    ))
    .unwrap()
}

fn wmmse_batches(c: &mut Criterion) {
    let mut group = c.benchmark_group("wmmse_batch");
    group.sample_size(10);
    for n in [5, 20] {
        let cfg = bench_config(n);
        for (name, exec) in [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)] {
            group.bench_with_input(BenchmarkId::new(name, n), &cfg, |b, cfg| {
                b.iter(|| ura_bench(cfg, exec).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, wmmse_batches);
criterion_main!(benches);
