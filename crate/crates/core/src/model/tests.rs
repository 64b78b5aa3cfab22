use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::styletext::AttributeCodebook;
use crate::synthgen::{make_sample, DatasetConfig};
use crate::tensor::grad_check;

fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect();
    Tensor::from_vec(data, shape).unwrap()
}

fn frozen_encoder(cfg: &ModelConfig, seed: u64) -> Encoder {
    let mut e = Encoder::new(cfg, &mut crate::seed::rng(seed, &[1]));
    e.freeze();
    e
}

fn micro_model(seed: u64) -> SegModel {
    let cfg = ModelConfig::micro();
    let mut m = SegModel::new(cfg.clone(), frozen_encoder(&cfg, seed), seed).unwrap();
    // Move every trainable tensor off its structured init so no gradient is
    // identically zero.
    let mut rng = crate::seed::rng(seed, &[2]);
    for store in [&mut m.adapter.params, &mut m.proj.params, &mut m.decoder.params] {
        for t in store.tensors_mut() {
            *t = random_tensor(&mut rng, t.shape(), 0.5);
        }
    }
    m
}

fn micro_images(seed: u64, n: usize) -> Tensor {
    let mut rng = crate::seed::rng(seed, &[3]);
    let data = (0..n * 256).map(|_| rng.random::<f64>()).collect();
    Tensor::from_vec(data, &[n, 1, 16, 16]).unwrap()
}

#[test]
fn default_config_shapes_and_parameter_budget() {
    let cfg = ModelConfig::default();
    let m = SegModel::new(cfg.clone(), frozen_encoder(&cfg, 0), 0).unwrap();
    let raw = m.encode(&Tensor::zeros(&[2, 1, 64, 64])).unwrap();
    assert_eq!(raw.shape(), [2, 64, 8, 8]);
    let ratio = m.trainable_params() as f64 / m.total_params() as f64;
    assert!(ratio < 0.10, "trainable ratio {ratio}");
}

#[test]
fn encode_requires_frozen_encoder_and_checks_size() {
    let cfg = ModelConfig::micro();
    let enc = Encoder::new(&cfg, &mut crate::seed::rng(0, &[]));
    let m = SegModel::new(cfg, enc, 0).unwrap();
    assert!(matches!(m.encode(&micro_images(0, 1)), Err(ModelError::NotFrozen)));
    let m = micro_model(0);
    assert!(matches!(
        m.image_batch(&[&[0.0; 100]]),
        Err(ModelError::ImageSize { expected: 16, actual: 100 })
    ));
    let a = m.encode(&micro_images(4, 2)).unwrap();
    assert_eq!(a, m.encode(&micro_images(4, 2)).unwrap());
}

#[test]
fn gradients_flow_through_encoder_input_but_not_into_its_weights() {
    let m = micro_model(1);
    let tape = Tape::new();
    let x = tape.param(micro_images(1, 2));
    let before = tape.len();
    let raw = m.encode_var(&tape, x).unwrap();
    let bound = m.bind(&tape);
    let (_, logits, _) = m.forward_full(&tape, &bound, raw, None).unwrap();
    let grads = logits.mean_all().backward().unwrap();
    assert!(grads.wrt(x).unwrap().norm() > 0.0);
    assert!(bound.adapter.iter().all(|v| grads.wrt(*v).is_some()));
    // Encoder weights were recorded as constants right after `x`.
    let enc_weights = m.encoder.params.len();
    assert!(tape.len() > before + enc_weights);
}

#[test]
fn adapter_starts_as_identity() {
    let cfg = ModelConfig::default();
    let m = SegModel::new(cfg.clone(), frozen_encoder(&cfg, 5), 5).unwrap();
    let mut rng = crate::seed::rng(5, &[]);
    let raw = random_tensor(&mut rng, &[2, 64, 8, 8], 1.0);
    let f = m.features_from_raw(&raw).unwrap();
    assert!(f.max_abs_diff(&raw) < 1e-6);
}

#[test]
fn identity_film_matches_film_free_decoder() {
    let m = micro_model(2);
    let mut rng = crate::seed::rng(2, &[9]);
    for _ in 0..20 {
        let f = random_tensor(&mut rng, &[1, 3, 2, 2], 1.0);
        let plain = m.decode_features(&f, None).unwrap();
        let ident = m.decode_features(&f, Some(&m.identity_film())).unwrap();
        assert!(plain.max_abs_diff(&ident) <= 1e-12);
    }
}

#[test]
fn zero_film_gives_spatially_constant_logits() {
    let m = micro_model(3);
    let widths = m.config.decoder_channels.clone();
    let film = FiLMParams {
        gamma: widths.iter().map(|&c| vec![0.0; c]).collect(),
        beta: widths.iter().map(|&c| vec![0.0; c]).collect(),
    };
    let f = random_tensor(&mut crate::seed::rng(3, &[]), &[1, 3, 2, 2], 1.0);
    let logits = m.decode_features(&f, Some(&film)).unwrap();
    let bias = m.decoder.params.tensors().last().unwrap();
    let hw = 16 * 16;
    for (k, plane) in logits.data().chunks(hw).enumerate() {
        assert!(plane.iter().all(|&v| v == bias.data()[k]));
    }
}

#[test]
fn perturbing_first_layer_gamma_changes_logits() {
    let m = micro_model(4);
    let f = random_tensor(&mut crate::seed::rng(4, &[]), &[1, 3, 2, 2], 1.0);
    let mut film = m.identity_film();
    film.gamma[0][0] = 1.5;
    let a = m.decode_features(&f, None).unwrap();
    let b = m.decode_features(&f, Some(&film)).unwrap();
    assert!(a.max_abs_diff(&b) > 0.0);
}

#[test]
fn film_width_mismatch_is_rejected() {
    let m = micro_model(5);
    let f = Tensor::zeros(&[1, 3, 2, 2]);
    let film = FiLMParams::identity(&[2, 2]);
    assert!(matches!(
        m.decode_features(&f, Some(&film)),
        Err(ModelError::Film(FilmError::LayerCount { expected: 3, actual: 2 }))
    ));
    let film = FiLMParams::identity(&[2, 3, 2]);
    assert!(matches!(
        m.decode_features(&f, Some(&film)),
        Err(ModelError::Film(FilmError::Width { layer: 1, .. }))
    ));
}

#[test]
fn projection_is_unit_norm_even_for_constant_maps() {
    let m = micro_model(6);
    let raw = Tensor::full(&[3, 3, 2, 2], 0.7);
    let z = m.embed_from_raw(&raw).unwrap();
    for row in z.data().chunks(m.config.style_dim) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
    }
}

#[test]
fn forward_full_shapes_and_determinism() {
    let m = micro_model(7);
    let run = || {
        let tape = Tape::new();
        let raw = tape.constant(m.encode(&micro_images(7, 2)).unwrap());
        let bound = m.bind(&tape);
        let (f, logits, z) = m.forward_full(&tape, &bound, raw, None).unwrap();
        (f.to_tensor(), logits.to_tensor(), z.to_tensor())
    };
    let (f, logits, z) = run();
    assert_eq!(f.shape(), [2, 3, 2, 2]);
    assert_eq!(logits.shape(), [2, 3, 16, 16]);
    assert_eq!(z.shape(), [2, 4]);
    assert_eq!((f.clone(), logits.clone(), z.clone()), run());
    let pred = m.predict_logits(&micro_images(7, 2), Some(&m.identity_film())).unwrap();
    assert_eq!(pred, logits);
}

/// Loss over logits and style alignment used to probe whole-model gradients.
fn probe_loss<'t>(logits: Var<'t>, z: Var<'t>, style: Var<'t>) -> crate::tensor::Result<Var<'t>> {
    let p = logits.softmax();
    let seg = p.mul(p)?.mean_all();
    let cos = z.mul(style)?.sum_all();
    Ok(seg.add(cos.scale(0.1))?)
}

#[test]
fn micro_model_gradients_match_finite_differences() {
    for case in 0..20u64 {
        let m = micro_model(100 + case);
        let raw = m.encode(&micro_images(case, 2)).unwrap();
        let mut rng = crate::seed::rng(case, &[5]);
        let style = random_tensor(&mut rng, &[2, 4], 1.0);
        let stores = [&m.adapter.params, &m.proj.params, &m.decoder.params];
        for (s, store) in stores.iter().enumerate() {
            for i in 0..store.len() {
                let err = grad_check(
                    |tape, x| {
                        let mut b = m.bind(tape);
                        let slot = match s {
                            0 => &mut b.adapter,
                            1 => &mut b.proj,
                            _ => &mut b.decoder,
                        };
                        slot[i] = x;
                        let (_, logits, z) = m
                            .forward_full(tape, &b, tape.constant(raw.clone()), None)
                            .map_err(|e| match e {
                                ModelError::Tensor(t) => t,
                                other => panic!("{other}"),
                            })?;
                        probe_loss(logits, z, tape.constant(style.clone()))
                    },
                    store.get(i),
                    1e-5,
                )
                .unwrap();
                assert!(err < 1e-4, "case {case} store {s} tensor {i}: {err}");
            }
        }
    }
}

#[test]
fn snapshot_round_trips_byte_identically() {
    let m = micro_model(8);
    let cfg = m.config.clone();
    let snap = ModelSnapshot {
        grl: Some(GrlHead::new(&cfg, 3, &mut crate::seed::rng(8, &[]))),
        model: m,
        codebook: AttributeCodebook::new(8, cfg.style_dim),
        method: "lad".into(),
        seeds: [("train".to_string(), 8u64)].into(),
    };
    let bytes = snap.to_bytes();
    assert_eq!(&bytes[..5], SNAPSHOT_MAGIC);
    let back = ModelSnapshot::from_bytes(&bytes).unwrap();
    assert_eq!(back, snap);
    assert!(back.model.encoder.frozen);
    assert_eq!(back.to_bytes(), bytes);
    let img = micro_images(8, 1);
    let a = snap.model.predict_logits(&img, None).unwrap();
    let b = back.model.predict_logits(&img, None).unwrap();
    assert!(a.max_abs_diff(&b) <= 1e-15);

    let mut bad = bytes.clone();
    let n = bad.len();
    bad[n - 40] ^= 1;
    assert!(matches!(ModelSnapshot::from_bytes(&bad), Err(SnapshotError::Checksum(_))));
    assert!(matches!(
        ModelSnapshot::from_bytes(&bytes[..n - 1]),
        Err(SnapshotError::CorruptSection { section, .. }) if section == "codebook"
    ));
    assert!(matches!(ModelSnapshot::from_bytes(b"NOPE!"), Err(SnapshotError::Magic)));
}

#[test]
fn snapshot_without_grl_head_and_file_round_trip() {
    let m = micro_model(9);
    let snap = ModelSnapshot {
        codebook: AttributeCodebook::new(1, m.config.style_dim),
        model: m,
        grl: None,
        method: "erm_lambda0".into(),
        seeds: Default::default(),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.cslm");
    snap.save(&path).unwrap();
    let back = ModelSnapshot::load(&path).unwrap();
    assert_eq!(back, snap);
    assert_eq!(back.content_hash(), snap.content_hash());
}

fn micro_data_cfg() -> DatasetConfig {
    DatasetConfig {
        image_size: 16,
        num_classes: 3,
        ..DatasetConfig::default()
    }
}

fn pretrain_pool(n: u64) -> Vec<crate::synthgen::Sample> {
    let dc = micro_data_cfg();
    let domains: Vec<_> = dc.source_domains.iter().chain(&dc.ood_domains).collect();
    (0..n)
        .map(|i| make_sample(&dc, domains[i as usize % domains.len()], 10_000 + i, i))
        .collect()
}

#[test]
fn pretraining_needs_a_large_enough_pool() {
    let pool = pretrain_pool(50);
    let r = pretrain_encoder(&ModelConfig::micro(), &micro_data_cfg(), &pool, &PretrainConfig::default(), 0);
    assert!(matches!(r, Err(ModelError::PoolTooSmall(50))));
}

#[test]
fn pretraining_reduces_reconstruction_error_and_is_deterministic() {
    let pool = pretrain_pool(220);
    let cfg = ModelConfig {
        encoder_channels: vec![4, 8, 8],
        encoder_blocks: vec![0, 1, 1],
        decoder_channels: vec![8, 4, 4],
        ..ModelConfig::micro()
    };
    let pc = PretrainConfig {
        epochs: 3,
        ..PretrainConfig::default()
    };
    let (enc, report) = pretrain_encoder(&cfg, &micro_data_cfg(), &pool, &pc, 3).unwrap();
    assert!(enc.frozen);
    assert!(
        report.final_holdout_mse < report.initial_holdout_mse,
        "{report:?}"
    );
    let (enc2, _) = pretrain_encoder(&cfg, &micro_data_cfg(), &pool, &pc, 3).unwrap();
    assert_eq!(enc.params.content_hash(), enc2.params.content_hash());
}
