//! Training loop for LAD and the baselines, run configuration and logs.
//!
//! The encoder is frozen, so its output for each sample is computed once
//! ([`FeatureBank`]) and every epoch trains only the adapter, projection
//! head, decoder and (for GRL) the domain head.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::losses::{self, pseudo_domains, DisVariant, LossError};
use crate::metrics::dice_score;
use crate::model::{argmax_masks, Encoder, GrlHead, ModelConfig, ModelError, ModelSnapshot, SegModel, SnapshotError};
use crate::optim::{adam_step, AdamConfig, AdamState, OptimError};
use crate::seed;
use crate::styletext::{hex, AttributeCodebook};
use crate::synthgen::Sample;
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("non-finite {term} at epoch {epoch}, step {step}")]
    NonFinite { epoch: usize, step: usize, term: String },
    #[error("feature bank has {features} rows for {samples} samples")]
    Mismatch { features: usize, samples: usize },
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Lad,
    ErmLambda0,
    Grl,
    Mixstyle,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Lad, Method::ErmLambda0, Method::Grl, Method::Mixstyle];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Lad => "lad",
            Method::ErmLambda0 => "erm_lambda0",
            Method::Grl => "grl",
            Method::Mixstyle => "mixstyle",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| TrainError::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub lambda: f64,
    pub dis_variant: DisVariant,
    pub lambda_grl: f64,
    pub mixstyle_alpha: f64,
    pub lr: f64,
    pub betas: (f64, f64),
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Share of the training split held out for epoch-end validation.
    pub val_fraction: f64,
    pub codebook_seed: u64,
    pub dataset: Option<String>,
    pub encoder_snapshot: Option<String>,
    pub output_snapshot: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Lad,
            lambda: 0.1,
            dis_variant: DisVariant::Signed,
            lambda_grl: 0.1,
            mixstyle_alpha: 0.1,
            lr: 1e-3,
            betas: (0.9, 0.999),
            epochs: 30,
            batch_size: 16,
            seed: 0,
            val_fraction: 0.1,
            codebook_seed: 7,
            dataset: None,
            encoder_snapshot: None,
            output_snapshot: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad(format!("betas must lie in [0,1), got ({b1}, {b2})"));
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(0.0..0.5).contains(&self.val_fraction) {
            return bad(format!("val_fraction must lie in [0,0.5), got {}", self.val_fraction));
        }
        match self.method {
            Method::Lad if !(self.lambda >= 0.0) => bad(format!("lad needs lambda >= 0, got {}", self.lambda)),
            Method::Grl if !(self.lambda_grl > 0.0) => {
                bad(format!("grl needs lambda_grl > 0, got {}", self.lambda_grl))
            }
            Method::Mixstyle if !(self.mixstyle_alpha > 0.0) => {
                bad(format!("mixstyle needs alpha > 0, got {}", self.mixstyle_alpha))
            }
            _ => Ok(()),
        }
    }

    /// Weight on the disentanglement term actually used by `method`.
    pub fn effective_lambda(&self) -> f64 {
        match self.method {
            Method::Lad => self.lambda,
            _ => 0.0,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

/// Frozen-encoder output for a list of samples, one flattened row each.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    /// `[C, h, w]` of one row.
    pub shape: [usize; 3],
    pub rows: Vec<Vec<f64>>,
}

impl FeatureBank {
    pub fn encode(model: &SegModel, samples: &[Sample]) -> Result<Self> {
        let c = model.config.feature_channels();
        let h = model.config.feature_size();
        let mut rows = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(32) {
            let imgs: Vec<Vec<f64>> = chunk.iter().map(Sample::image_f64).collect();
            let refs: Vec<&[f64]> = imgs.iter().map(Vec::as_slice).collect();
            let raw = model.encode(&model.image_batch(&refs)?)?;
            rows.extend(raw.data().chunks(c * h * h).map(<[f64]>::to_vec));
        }
        Ok(FeatureBank {
            shape: [c, h, h],
            rows,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Stacks the selected rows into `[n, C, h, w]`.
    pub fn batch(&self, idx: &[usize]) -> Tensor {
        let [c, h, w] = self.shape;
        let data = idx.iter().flat_map(|&i| self.rows[i].iter().copied()).collect();
        Tensor::from_vec(data, &[idx.len(), c, h, w]).expect("rows share one shape")
    }
}

/// Deterministic JSON-lines training record.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    lines: Vec<serde_json::Value>,
}

impl RunLog {
    pub fn push(&mut self, line: serde_json::Value) {
        self.lines.push(line);
    }

    pub fn lines(&self) -> &[serde_json::Value] {
        &self.lines
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for l in &self.lines {
            out.push_str(&serde_json::to_string(l).expect("json values serialize"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_jsonl())
    }
}

/// Version tag of the training code, hashed into every log.
pub fn code_version_hash() -> String {
    let v = concat!(env!("CARGO_PKG_NAME"), "@", env!("CARGO_PKG_VERSION"));
    hex(&Sha256::digest(v.as_bytes()))[..16].to_string()
}

/// Per-epoch wall-clock seconds; kept apart from the deterministic log.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub epoch_seconds: Vec<f64>,
}

pub struct TrainOutcome {
    pub snapshot: ModelSnapshot,
    pub log: RunLog,
    pub timing: Timing,
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub val_dice: Vec<f64>,
}

/// Mean foreground Dice of `model` over the given feature rows.
pub fn mean_dice(model: &SegModel, features: &FeatureBank, idx: &[usize], masks: &[&[u8]]) -> Result<f64> {
    let k = model.config.num_classes;
    let mut total = 0.0;
    for (chunk, mchunk) in idx.chunks(32).zip(masks.chunks(32)) {
        let logits = model.logits_from_raw(&features.batch(chunk), None)?;
        for (pred, truth) in argmax_masks(&logits).iter().zip(mchunk) {
            total += (1..k as u8).map(|c| dice_score(pred, truth, c)).sum::<f64>() / (k - 1) as f64;
        }
    }
    Ok(total / idx.len().max(1) as f64)
}

fn check_finite(v: f64, epoch: usize, step: usize, term: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(TrainError::NonFinite {
            epoch,
            step,
            term: term.to_string(),
        })
    }
}

/// Trains the non-frozen parts of a model on `samples` (with precomputed
/// `features`) and returns the best-validation snapshot.
pub fn train(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    encoder: &Encoder,
    codebook: &AttributeCodebook,
    samples: &[Sample],
    features: &FeatureBank,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !encoder.frozen {
        return Err(ModelError::NotFrozen.into());
    }
    if features.len() != samples.len() {
        return Err(TrainError::Mismatch {
            features: features.len(),
            samples: samples.len(),
        });
    }
    if codebook.dim != model_cfg.style_dim {
        return Err(TrainError::Config(format!(
            "codebook dim {} differs from style_dim {}",
            codebook.dim, model_cfg.style_dim
        )));
    }
    let lambda = cfg.effective_lambda();
    let mut model = SegModel::new(model_cfg.clone(), encoder.clone(), seed::derive(cfg.seed, &[seed::tag("init")]))?;

    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut seed::rng_for(cfg.seed, "val_split"));
    let n_val = (samples.len() as f64 * cfg.val_fraction).round() as usize;
    let val_idx: Vec<usize> = order[..n_val].to_vec();
    let mut train_idx: Vec<usize> = order[n_val..].to_vec();
    train_idx.sort_unstable();
    if train_idx.len() < cfg.batch_size {
        return Err(TrainError::Config(format!(
            "{} training samples is fewer than one batch of {}",
            train_idx.len(),
            cfg.batch_size
        )));
    }
    let val_masks: Vec<&[u8]> = val_idx.iter().map(|&i| samples[i].mask.as_slice()).collect();

    let styles: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| codebook.embed_descriptor(&s.descriptor).0)
        .collect();

    let (domain_labels, mut grl_head) = if cfg.method == Method::Grl {
        let descs: Vec<_> = train_idx.iter().map(|&i| &samples[i].descriptor).collect();
        let (labels, names) = pseudo_domains(&descs, &codebook.bins)?;
        let mut by_sample = vec![0usize; samples.len()];
        for (&i, l) in train_idx.iter().zip(labels) {
            by_sample[i] = l;
        }
        let head = GrlHead::new(model_cfg, names.len(), &mut seed::rng_for(cfg.seed, "grl_head"));
        (by_sample, Some(head))
    } else {
        (Vec::new(), None)
    };

    let adam = AdamConfig {
        lr: cfg.lr,
        beta1: cfg.betas.0,
        beta2: cfg.betas.1,
        ..AdamConfig::default()
    };
    let counts = [
        model.adapter.params.len(),
        model.proj.params.len(),
        model.decoder.params.len(),
    ];
    let mut params: Vec<Tensor> = model
        .adapter
        .params
        .tensors()
        .iter()
        .chain(model.proj.params.tensors())
        .chain(model.decoder.params.tensors())
        .chain(grl_head.iter().flat_map(|h| h.params.tensors()))
        .cloned()
        .collect();
    let mut state = AdamState::new(&params);

    let mut log = RunLog::default();
    log.push(json!({
        "kind": "config",
        "code_version": code_version_hash(),
        "train": cfg,
        "model": model_cfg,
        "encoder_hash": encoder.params.content_hash(),
        "codebook_hash": codebook.content_hash(),
        "train_samples": train_idx.len(),
        "val_samples": val_idx.len(),
    }));

    let mut order_rng = seed::rng_for(cfg.seed, "order");
    let mut aug_rng = seed::rng_for(cfg.seed, "augment");
    let mut timing = Timing::default();
    let mut val_dice = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Vec<Tensor>)> = None;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        train_idx.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in train_idx.chunks(cfg.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let tape = Tape::new();
            let vars: Vec<_> = params.iter().map(|t| tape.param(t.clone())).collect();
            let (ad, rest) = vars.split_at(counts[0]);
            let (pj, rest) = rest.split_at(counts[1]);
            let (dc, gh) = rest.split_at(counts[2]);

            let raw = features.batch(batch);
            if raw.data().iter().any(|v| !v.is_finite()) {
                check_finite(f64::NAN, epoch, step, "features")?;
            }
            let raw = tape.constant(raw);
            let mut f = model.adapter.forward(ad, raw)?;
            if cfg.method == Method::Mixstyle {
                f = losses::mixstyle_augment(f, cfg.mixstyle_alpha, &mut aug_rng)?;
            }
            let logits = model.decoder.forward(&tape, dc, f, None)?;
            let z = model.proj.forward(pj, f)?;
            let style_data: Vec<f64> = batch.iter().flat_map(|&i| styles[i].iter().copied()).collect();
            let z_style = tape.constant(Tensor::from_vec(style_data, &[batch.len(), model_cfg.style_dim])?);
            let masks: Vec<&[u8]> = batch.iter().map(|&i| samples[i].mask.as_slice()).collect();

            let mut loss = losses::total_loss(logits, &masks, z, z_style, lambda, cfg.dis_variant)?;
            if let Some(head) = &grl_head {
                let labels: Vec<usize> = batch.iter().map(|&i| domain_labels[i]).collect();
                let term = losses::grl_domain_loss(f, &labels, head, gh, cfg.lambda_grl)?;
                loss.add_aux("grl", term)?;
            }
            let r = &loss.report;
            check_finite(r.l_seg, epoch, step, "l_seg")?;
            check_finite(r.l_dis, epoch, step, "l_dis")?;
            for (name, v) in &r.aux {
                check_finite(*v, epoch, step, name)?;
            }
            log.push(json!({"kind": "step", "epoch": epoch, "step": step, "loss": r}));
            epoch_loss += r.l_total;
            batches += 1;

            let mut grads = loss.total.backward()?;
            let g: Vec<Option<Tensor>> = vars.iter().map(|v| grads.take(*v)).collect();
            adam_step(&mut params, &g, &mut state, &adam)?;
            step += 1;
        }

        write_back(&mut model, grl_head.as_mut(), &params, counts);
        let vd = if val_idx.is_empty() {
            0.0
        } else {
            mean_dice(&model, features, &val_idx, &val_masks)?
        };
        val_dice.push(vd);
        log.push(json!({
            "kind": "epoch",
            "epoch": epoch,
            "mean_l_total": epoch_loss / batches.max(1) as f64,
            "val_dice": vd,
        }));
        if best.as_ref().is_none_or(|(_, b, _)| vd > *b) {
            best = Some((epoch, vd, params.clone()));
        }
        timing.epoch_seconds.push(started.elapsed().as_secs_f64());
    }

    let (best_epoch, best_val_dice, best_params) = best.expect("at least one epoch");
    write_back(&mut model, grl_head.as_mut(), &best_params, counts);
    log.push(json!({
        "kind": "end",
        "best_epoch": best_epoch,
        "best_val_dice": best_val_dice,
        "encoder_hash": model.encoder.params.content_hash(),
    }));
    let seeds: BTreeMap<String, u64> = [
        ("train".to_string(), cfg.seed),
        ("codebook".to_string(), codebook.seed),
    ]
    .into();
    Ok(TrainOutcome {
        snapshot: ModelSnapshot {
            model,
            grl: grl_head,
            codebook: codebook.clone(),
            method: cfg.method.to_string(),
            seeds,
        },
        log,
        timing,
        best_epoch,
        best_val_dice,
        val_dice,
    })
}

fn write_back(model: &mut SegModel, grl: Option<&mut GrlHead>, params: &[Tensor], counts: [usize; 3]) {
    let (ad, rest) = params.split_at(counts[0]);
    let (pj, rest) = rest.split_at(counts[1]);
    let (dc, gh) = rest.split_at(counts[2]);
    model.adapter.params.tensors_mut().clone_from_slice(ad);
    model.proj.params.tensors_mut().clone_from_slice(pj);
    model.decoder.params.tensors_mut().clone_from_slice(dc);
    if let Some(h) = grl {
        h.params.tensors_mut().clone_from_slice(gh);
    }
}

pub fn save_snapshot(s: &ModelSnapshot, path: &Path) -> Result<()> {
    Ok(s.save(path)?)
}

pub fn load_snapshot(path: &Path) -> Result<ModelSnapshot> {
    Ok(ModelSnapshot::load(path)?)
}
