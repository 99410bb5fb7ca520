use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use tglobal_bench::{BenchConfig, Workload};
use tglobal_core::AttentionMode;

fn encoder_step(c: &mut Criterion) {
    let cfg = BenchConfig {
        batch: 1,
        ..BenchConfig::default()
    };
    let mut group = c.benchmark_group("encoder_fwd_bwd");
    group.sample_size(10);
    for l in [256usize, 1024] {
        for mode in AttentionMode::ALL {
            let w = Workload::new(&cfg, mode, l).expect("workload");
            group.bench_with_input(BenchmarkId::new(mode.to_string(), l), &l, |b, _| {
                b.iter(|| w.step(1).expect("step"))
            });
        }
    }
    group.finish();
}

criterion_group!(benches, encoder_step);
criterion_main!(benches);
