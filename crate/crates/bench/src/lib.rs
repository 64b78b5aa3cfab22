//! Fixtures shared by the benchmarks.

use causalseg::model::{Encoder, ModelConfig, SegModel};
use causalseg::seed;
use causalseg::synthgen::{generate_dataset, Dataset, DatasetConfig};
use causalseg::tensor::Tensor;

/// Deterministic pseudo-random tensor in [-1, 1).
pub fn tensor(shape: &[usize], s: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n as u64)
        .map(|i| (seed::derive(s, &[i]) >> 11) as f64 / (1u64 << 52) as f64 - 1.0)
        .collect();
    Tensor::from_vec(data, shape).expect("shape matches length")
}

/// A model with a frozen random encoder; weights are untrained.
pub fn model(cfg: ModelConfig) -> SegModel {
    let mut enc = Encoder::new(&cfg, &mut seed::rng(0, &[seed::tag("bench")]));
    enc.freeze();
    SegModel::new(cfg, enc, 0).expect("valid config")
}

/// A small dataset matching `ModelConfig::default()` image size and classes.
pub fn dataset(samples: usize) -> Dataset {
    generate_dataset(&DatasetConfig {
        samples_per_domain: samples,
        test_samples_per_domain: samples.max(40),
        ..DatasetConfig::default()
    })
    .expect("valid dataset config")
}
