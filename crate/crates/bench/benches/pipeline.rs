use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use causalseg::model::ModelConfig;
use causalseg::reasoner::{parse_command, rule_reasoner, search_film, SearchConfig};
use causalseg::trainer::FeatureBank;
use causalseg_bench::{dataset, model, tensor};

fn inference(c: &mut Criterion) {
    let m = model(ModelConfig::default());
    let images = tensor(&[8, 1, 64, 64], 5).map(|v| 0.5 + 0.5 * v);
    let raw = m.encode(&images).unwrap();
    let film = m.identity_film();
    let mut g = c.benchmark_group("inference batch 8");
    g.sample_size(20);
    g.bench_function("encode", |b| b.iter(|| black_box(m.encode(&images).unwrap())));
    g.bench_function("decode", |b| b.iter(|| black_box(m.logits_from_raw(&raw, None).unwrap())));
    g.bench_function("decode with film", |b| b.iter(|| black_box(m.logits_from_raw(&raw, Some(&film)).unwrap())));
    g.finish();
}

fn feature_bank(c: &mut Criterion) {
    let m = model(ModelConfig::default());
    let data = dataset(32);
    let mut g = c.benchmark_group("feature bank");
    g.sample_size(10);
    g.bench_function("encode 32 samples", |b| b.iter(|| black_box(FeatureBank::encode(&m, &data.train).unwrap())));
    g.finish();
}

fn intervention(c: &mut Criterion) {
    let m = model(ModelConfig::default());
    let k = m.config.num_classes;
    c.bench_function("parse + rule reasoner", |b| {
        b.iter(|| {
            let cmd = parse_command(black_box("expand class=2 amount=0.6"), k).unwrap();
            black_box(rule_reasoner(&cmd, &m.decoder))
        })
    });
    let data = dataset(4);
    let s = &data.train[0];
    let raw = m.encode(&m.image_batch(&[&s.image_f64()]).unwrap()).unwrap();
    let cfg = SearchConfig {
        sweeps: 1,
        refinements: 0,
        ..SearchConfig::default()
    };
    let mut g = c.benchmark_group("film search");
    g.sample_size(10);
    g.bench_function("one sweep", |b| b.iter(|| black_box(search_film(&m, &raw, &s.mask, &cfg).unwrap())));
    g.finish();
}

criterion_group!(benches, inference, feature_bank, intervention);
criterion_main!(benches);
