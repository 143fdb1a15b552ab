use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fusionlab_bench::fusion_instance;
use fusionlab_core::design::{next_stage_risk, select, DesignContext, Hyperparams, Method};
use fusionlab_core::fusion::fuse;

fn bench_fuse(c: &mut Criterion) {
    let mut group = c.benchmark_group("fuse");
    for j in [30, 100] {
        let (state, catalog, d) = fusion_instance(j, 3, j / 3, 1);
        group.bench_with_input(BenchmarkId::from_parameter(j), &j, |b, _| {
            b.iter(|| fuse(black_box(&state), &catalog, &d).unwrap())
        });
    }
    group.finish();
}

fn bench_design(c: &mut Criterion) {
    let hyper = Hyperparams::default();
    let mut group = c.benchmark_group("design");
    for j in [30, 100] {
        let (state, catalog, d) = fusion_instance(j, 3, j / 3, 2);
        let f = fuse(&state, &catalog, &d).unwrap();
        let ctx = DesignContext {
            state: &state,
            design: catalog.design(),
            fusion: &f,
            weights: &d,
            quadratic: hyper.quadratic,
        };
        let sampled: Vec<f64> = (0..j).map(|k| 1.0 + (k % 5) as f64).collect();
        group.bench_with_input(BenchmarkId::new("next_stage_risk", j), &j, |b, &j| {
            b.iter(|| next_stage_risk(&ctx, black_box(&sampled), j - 1, 400, f.lambda_hat).unwrap())
        });
        for method in [Method::Thompson, Method::Dopt] {
            group.bench_with_input(BenchmarkId::new(method.as_str(), j), &j, |b, _| {
                b.iter(|| select(method, &ctx, &hyper, 3, 400, black_box(7), &state.ever_selected(), false).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, bench_fuse, bench_design);
criterion_main!(benches);
