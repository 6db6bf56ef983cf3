use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use gmcn::activation::{least_squares_relu_fit, relu_dense_fit, DenseFitConfig, SampleSet};
use gmcn::reduce::{reduce, ReductionConfig, ReductionMethod};
use gmcn_bench::mixture;

fn activation(c: &mut Criterion) {
    let mut g = c.benchmark_group("relu");
    let cfg = DenseFitConfig::default();
    for n in [64, 256] {
        let gs = mixture(n, 2, true, 0);
        g.bench_with_input(BenchmarkId::new("dense", n), &gs, |b, gs| b.iter(|| relu_dense_fit(black_box(gs), &cfg).unwrap()));
    }
    g.sample_size(10);
    let gs = mixture(256, 2, true, 0);
    g.bench_function("least-squares/256", |b| {
        b.iter(|| least_squares_relu_fit(black_box(&gs), SampleSet::CentersAndRandom(256), 0).unwrap())
    });
    g.finish();
}

fn reduction(c: &mut Criterion) {
    let mut g = c.benchmark_group("reduce");
    g.sample_size(20);
    let methods = [
        ("treehem-2", ReductionMethod::TreeHem { t: 2 }),
        ("treehem-4", ReductionMethod::TreeHem { t: 4 }),
        ("modified-em", ReductionMethod::ModifiedEm),
    ];
    for n in [512, 1024, 2048] {
        let gs = mixture(n, 2, false, 1);
        for (name, method) in methods {
            let cfg = ReductionConfig {
                method,
                ..Default::default()
            };
            g.bench_with_input(BenchmarkId::new(name, n), &gs, |b, gs| b.iter(|| reduce(black_box(gs), n / 4, &cfg).unwrap()));
        }
    }
    g.finish();
}

criterion_group!(benches, activation, reduction);
criterion_main!(benches);
