use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::layers::{Decoder, Encoder};
use super::{ModelConfig, ModelError, Result};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::seed;
use crate::synthgen::{render_content, DatasetConfig, Sample};
use crate::tensor::{Tape, Tensor};

pub const MIN_PRETRAIN_POOL: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Share of the pool held out to measure reconstruction error.
    pub holdout_fraction: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 12,
            batch_size: 16,
            lr: 2e-3,
            holdout_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub initial_holdout_mse: f64,
    pub final_holdout_mse: f64,
    pub epoch_train_mse: Vec<f64>,
}

struct Pair {
    styled: Vec<f64>,
    clean: Vec<f64>,
}

fn batch_tensors(pairs: &[&Pair], s: usize) -> Result<(Tensor, Tensor)> {
    let n = pairs.len();
    let x: Vec<f64> = pairs.iter().flat_map(|p| p.styled.iter().copied()).collect();
    let y: Vec<f64> = pairs.iter().flat_map(|p| p.clean.iter().copied()).collect();
    Ok((Tensor::from_vec(x, &[n, 1, s, s])?, Tensor::from_vec(y, &[n, 1, s, s])?))
}

fn holdout_mse(encoder: &Encoder, decoder: &Decoder, pairs: &[&Pair], s: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in pairs.chunks(32) {
        let (x, y) = batch_tensors(chunk, s)?;
        let tape = Tape::new();
        let ew = encoder.params.bind(&tape, false);
        let dw = decoder.params.bind(&tape, false);
        let h = encoder.forward(&ew, tape.constant(x))?;
        let out = decoder.forward(&tape, &dw, h, None)?;
        total += out.sub(tape.constant(y))?.to_tensor().data().iter().map(|d| d * d).sum::<f64>();
    }
    Ok(total / (pairs.len() * s * s) as f64)
}

fn make_pairs(data_cfg: &DatasetConfig, pool: &[Sample]) -> Vec<Pair> {
    pool.iter()
        .map(|smp| Pair {
            styled: smp.image_f64(),
            clean: render_content(smp.content_seed, data_cfg)
                .0
                .into_iter()
                .map(f64::from)
                .collect(),
        })
        .collect()
}

/// Trains the encoder with a throwaway decoder to recover clean content from
/// styled images, then freezes it.
pub fn pretrain_encoder(
    cfg: &ModelConfig,
    data_cfg: &DatasetConfig,
    pool: &[Sample],
    pc: &PretrainConfig,
    seed: u64,
) -> Result<(Encoder, PretrainReport)> {
    cfg.validate()?;
    if pool.len() < MIN_PRETRAIN_POOL {
        return Err(ModelError::PoolTooSmall(pool.len()));
    }
    if data_cfg.image_size != cfg.image_size {
        return Err(ModelError::Config(format!(
            "dataset image size {} differs from model image size {}",
            data_cfg.image_size, cfg.image_size
        )));
    }
    let s = cfg.image_size;
    let mut encoder = Encoder::new(cfg, &mut seed::rng_for(seed, "pretrain.encoder"));
    let mut decoder = Decoder::new(cfg, 1, &mut seed::rng_for(seed, "pretrain.decoder"));

    let pairs = make_pairs(data_cfg, pool);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut seed::rng_for(seed, "pretrain.split"));
    let n_hold = ((pairs.len() as f64 * pc.holdout_fraction).round() as usize).clamp(1, pairs.len() - 1);
    let holdout: Vec<&Pair> = order[..n_hold].iter().map(|&i| &pairs[i]).collect();
    let mut train: Vec<&Pair> = order[n_hold..].iter().map(|&i| &pairs[i]).collect();

    let initial_holdout_mse = holdout_mse(&encoder, &decoder, &holdout, s)?;
    let adam = AdamConfig {
        lr: pc.lr,
        ..AdamConfig::default()
    };
    let n_enc = encoder.params.len();
    let mut all: Vec<Tensor> = encoder
        .params
        .tensors()
        .iter()
        .chain(decoder.params.tensors())
        .cloned()
        .collect();
    let mut state = AdamState::new(&all);
    let mut epoch_train_mse = Vec::with_capacity(pc.epochs);
    let mut shuffle_rng = seed::rng_for(seed, "pretrain.shuffle");
    for _ in 0..pc.epochs {
        train.shuffle(&mut shuffle_rng);
        let mut sum = 0.0;
        for chunk in train.chunks(pc.batch_size.max(1)) {
            let (x, y) = batch_tensors(chunk, s)?;
            let tape = Tape::new();
            let vars: Vec<_> = all.iter().map(|t| tape.param(t.clone())).collect();
            let h = encoder.forward(&vars[..n_enc], tape.constant(x))?;
            let out = decoder.forward(&tape, &vars[n_enc..], h, None)?;
            let diff = out.sub(tape.constant(y))?;
            let loss = diff.mul(diff)?.mean_all();
            let l = loss.item();
            if !l.is_finite() {
                return Err(ModelError::Config("pretraining diverged (non-finite loss)".into()));
            }
            sum += l * chunk.len() as f64;
            let mut grads = loss.backward()?;
            let g: Vec<Option<Tensor>> = vars.iter().map(|v| grads.take(*v)).collect();
            adam_step(&mut all, &g, &mut state, &adam).expect("one slot per parameter");
        }
        epoch_train_mse.push(sum / train.len() as f64);
    }
    let (enc, dec) = all.split_at(n_enc);
    encoder.params.tensors_mut().clone_from_slice(enc);
    decoder.params.tensors_mut().clone_from_slice(dec);
    let final_holdout_mse = holdout_mse(&encoder, &decoder, &holdout, s)?;
    encoder.freeze();
    Ok((
        encoder,
        PretrainReport {
            initial_holdout_mse,
            final_holdout_mse,
            epoch_train_mse,
        },
    ))
}
