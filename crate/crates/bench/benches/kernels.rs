use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use tilegan::sampler::seeded_rng;
use tilegan::tensor::{Dims4, Graph, Tensor4};

fn conv_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_forward");
    for &(size, cin, cout, stride) in &[(128, 3, 64, 1), (128, 64, 128, 2), (32, 256, 256, 1)] {
        let mut r = seeded_rng(1);
        let x = Tensor4::rand_uniform(Dims4::new(1, size, size, cin), -1.0, 1.0, &mut r);
        let w = Tensor4::rand_uniform(Dims4::new(cout, 3, 3, cin), -0.1, 0.1, &mut r);
        let b = Tensor4::zeros(Dims4::new(1, 1, 1, cout));
        group.throughput(Throughput::Elements((size * size) as u64));
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("{size}x{size}x{cin}->{cout}/s{stride}")),
            &(x, w, b),
            |bench, (x, w, b)| {
                bench.iter(|| {
                    let mut g = Graph::standalone_inference();
                    let (xv, wv, bv) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
                    let y = g.conv2d(xv, wv, bv, stride, 1).unwrap();
                    black_box(g.into_value(y))
                })
            },
        );
    }
    group.finish();
}

fn conv_transpose_forward(c: &mut Criterion) {
    let mut r = seeded_rng(2);
    let x = Tensor4::rand_uniform(Dims4::new(1, 32, 32, 128), -1.0, 1.0, &mut r);
    let w = Tensor4::rand_uniform(Dims4::new(128, 3, 3, 64), -0.1, 0.1, &mut r);
    let b = Tensor4::zeros(Dims4::new(1, 1, 1, 64));
    c.bench_function("conv_transpose2d_forward/32x32x128->64/s2", |bench| {
        bench.iter(|| {
            let mut g = Graph::standalone_inference();
            let (xv, wv, bv) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
            let y = g.conv_transpose2d(xv, wv, bv, 2, 1, 1).unwrap();
            black_box(g.into_value(y))
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = conv_forward, conv_transpose_forward
}
criterion_main!(benches);
