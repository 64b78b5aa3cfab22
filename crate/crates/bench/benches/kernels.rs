use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use causalseg::metrics::{dice_score, hd95, HdConvention};
use causalseg::tensor::Tape;
use causalseg_bench::tensor;

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d");
    for &(ch, size) in &[(8usize, 32usize), (16, 64)] {
        let x = tensor(&[4, ch, size, size], 1);
        let k = tensor(&[ch, ch, 3, 3], 2);
        g.bench_with_input(BenchmarkId::new("forward", format!("{ch}x{size}")), &(), |b, _| {
            b.iter(|| {
                let t = Tape::new();
                black_box(t.constant(x.clone()).conv2d(t.constant(k.clone()), 1, 1).unwrap().to_tensor())
            })
        });
        g.bench_with_input(BenchmarkId::new("forward_backward", format!("{ch}x{size}")), &(), |b, _| {
            b.iter(|| {
                let t = Tape::new();
                let kv = t.param(k.clone());
                let loss = t.constant(x.clone()).conv2d(kv, 1, 1).unwrap().relu().sum_all();
                black_box(loss.backward().unwrap())
            })
        });
    }
    g.finish();
}

fn matmul(c: &mut Criterion) {
    let a = tensor(&[256, 256], 3);
    let b = tensor(&[256, 256], 4);
    c.bench_function("matmul 256", |bench| {
        bench.iter(|| {
            let t = Tape::new();
            black_box(t.constant(a.clone()).matmul(t.constant(b.clone())).unwrap().to_tensor())
        })
    });
}

fn masks(size: usize, shift: usize) -> (Vec<u8>, Vec<u8>) {
    let mut p = vec![0u8; size * size];
    let mut g = vec![0u8; size * size];
    for r in size / 4..3 * size / 4 {
        for c in size / 4..3 * size / 4 {
            g[r * size + c] = 1;
            p[r * size + (c + shift).min(size - 1)] = 1;
        }
    }
    (p, g)
}

fn metrics(c: &mut Criterion) {
    let (p, g) = masks(64, 3);
    c.bench_function("dice 64x64", |b| b.iter(|| black_box(dice_score(&p, &g, 1))));
    c.bench_function("hd95 64x64", |b| b.iter(|| black_box(hd95(&p, &g, 64, 1, HdConvention::Pooled))));
}

criterion_group!(benches, conv, matmul, metrics);
criterion_main!(benches);
