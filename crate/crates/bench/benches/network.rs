use criterion::{black_box, criterion_group, criterion_main, Criterion};

use gmcn::convolution_layer;
use gmcn_bench::{batch, toy_model};

fn convolution(c: &mut Criterion) {
    let model = toy_model(0);
    let kernels = model.materialize_kernels().unwrap();
    let x = batch(8, 16, 2);
    c.bench_function("convolution/8x16x8x5", |b| b.iter(|| convolution_layer(black_box(&x), &kernels[0]).unwrap()));
}

fn training_step(c: &mut Criterion) {
    let model = toy_model(0);
    let x = batch(8, 16, 3);
    let labels = vec![0, 1, 2, 0, 1, 2, 0, 1];
    let mut g = c.benchmark_group("model");
    g.sample_size(10);
    g.bench_function("forward/8", |b| b.iter(|| model.forward(black_box(&x)).unwrap()));
    g.bench_function("loss-and-grad/8", |b| b.iter(|| model.loss_and_grad(black_box(&x), &labels, true, 1e-4).unwrap()));
    g.finish();
}

criterion_group!(benches, convolution, training_step);
criterion_main!(benches);
