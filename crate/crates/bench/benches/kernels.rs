use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mrfusion::forest::{fit, ForestConfig};
use mrfusion::model::build_mrfusion;
use mrfusion::nn::{Padding, Tape};
use mrfusion_bench::{labeled, random};

/// Forward and backward through one convolution at the PAN and MS branch
/// stage sizes.
fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d");
    g.sample_size(10);
    for &(name, hw, cin, k, cout) in &[("pan-stage1", 32, 1, 7, 128), ("ms-stage3", 8, 512, 3, 1024)] {
        let x = random(&[8, hw, hw, cin], 1);
        let w = random(&[k, k, cin, cout], 2);
        let b = random(&[cout], 3);
        g.bench_function(BenchmarkId::new("forward", name), |bch| {
            bch.iter(|| {
                let mut t = Tape::inference();
                let (xv, wv, bv) = (t.input(x.clone()).unwrap(), t.input(w.clone()).unwrap(), t.input(b.clone()).unwrap());
                black_box(t.conv2d(xv, wv, bv, 1, Padding::Same).unwrap());
            })
        });
        g.bench_function(BenchmarkId::new("backward", name), |bch| {
            bch.iter(|| {
                let mut t = Tape::new();
                let (xv, wv, bv) = (t.leaf(x.clone()).unwrap(), t.leaf(w.clone()).unwrap(), t.leaf(b.clone()).unwrap());
                let y = t.conv2d(xv, wv, bv, 1, Padding::Same).unwrap();
                let target = mrfusion::Tensor::zeros(t.value(y).shape());
                let loss = t.squared_error(y, &target).unwrap();
                black_box(t.backward(loss).unwrap());
            })
        });
    }
    g.finish();
}

fn model(c: &mut Criterion) {
    let m = build_mrfusion::<f32>(6, 0).unwrap();
    let pan = random(&[32, 32, 32, 1], 4);
    let ms = random(&[32, 8, 8, 4], 5);
    let mut g = c.benchmark_group("mrfusion");
    g.sample_size(10);
    g.bench_function("predict-batch32", |b| b.iter(|| black_box(m.predict_proba(&[&pan, &ms]).unwrap())));
    g.finish();
}

fn forest(c: &mut Criterion) {
    let (x, y) = labeled(2000, 1536, 6, 6);
    let mut g = c.benchmark_group("forest");
    g.sample_size(10);
    g.bench_function("fit-50-trees-2000x1536", |b| {
        let cfg = ForestConfig {
            n_trees: 50,
            ..ForestConfig::default()
        };
        b.iter(|| black_box(fit(&x, &y, &cfg).unwrap()))
    });
    g.finish();
}

criterion_group!(benches, conv, model, forest);
criterion_main!(benches);
