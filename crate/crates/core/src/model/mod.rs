//! Segmentation network: a frozen convolutional encoder, a residual 1x1
//! adapter producing the shared feature map `f`, a projection head mapping
//! `f` into the style-embedding space, and a FiLM-modulated decoder.

mod film;
mod layers;
mod params;
mod pretrain;
mod snapshot;

pub use film::{FiLMParams, FilmError};
pub use layers::{Adapter, Decoder, Encoder, GrlHead, ProjectionHead};
pub use params::ParamStore;
pub use pretrain::{pretrain_encoder, PretrainConfig, PretrainReport, MIN_PRETRAIN_POOL};
pub(crate) use snapshot::{read_sections, write_sections};
pub use snapshot::{ModelSnapshot, SnapshotError, SNAPSHOT_MAGIC, SNAPSHOT_VERSION};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Film(#[from] FilmError),
    #[error("expected {expected}x{expected} images, got {actual} pixels")]
    ImageSize { expected: usize, actual: usize },
    #[error("encoder is not frozen; pretrain and freeze it first")]
    NotFrozen,
    #[error("pretraining pool has {0} samples, need at least 200")]
    PoolTooSmall(usize),
    #[error("invalid model config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub num_classes: usize,
    /// Output channels of each stride-2 encoder stage.
    pub encoder_channels: Vec<usize>,
    /// Residual 3x3 blocks after each encoder stage's downsampling conv.
    pub encoder_blocks: Vec<usize>,
    pub proj_hidden: usize,
    pub style_dim: usize,
    /// Output channels of each decoder stage; FiLM acts on each of them.
    pub decoder_channels: Vec<usize>,
    pub grl_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            num_classes: 4,
            encoder_channels: vec![16, 32, 64],
            encoder_blocks: vec![1, 1, 14],
            proj_hidden: 128,
            style_dim: crate::styletext::DEFAULT_STYLE_DIM,
            decoder_channels: vec![32, 16, 8],
            grl_hidden: 32,
        }
    }
}

impl ModelConfig {
    /// 16x16 configuration small enough for exhaustive gradient checks.
    pub fn micro() -> Self {
        ModelConfig {
            image_size: 16,
            num_classes: 3,
            encoder_channels: vec![2, 2, 3],
            encoder_blocks: vec![0, 0, 1],
            proj_hidden: 3,
            style_dim: 4,
            decoder_channels: vec![2, 2, 2],
            grl_hidden: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let stages = self.encoder_channels.len();
        if stages == 0 || self.encoder_blocks.len() != stages || self.decoder_channels.len() != stages {
            return Err(ModelError::Config(
                "encoder channels, encoder blocks and decoder channels need the same stage count".into(),
            ));
        }
        if self.image_size % (1 << stages) != 0 {
            return Err(ModelError::Config(format!(
                "image size {} not divisible by 2^{stages}",
                self.image_size
            )));
        }
        if self.num_classes < 2 || self.style_dim == 0 || self.proj_hidden == 0 {
            return Err(ModelError::Config("degenerate widths".into()));
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        *self.encoder_channels.last().expect("validated")
    }

    pub fn feature_size(&self) -> usize {
        self.image_size >> self.encoder_channels.len()
    }
}

/// Trainable parts bound to one tape.
pub struct BoundModel<'t> {
    pub adapter: Vec<Var<'t>>,
    pub proj: Vec<Var<'t>>,
    pub decoder: Vec<Var<'t>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub adapter: Adapter,
    pub proj: ProjectionHead,
    pub decoder: Decoder,
}

impl SegModel {
    /// Fresh trainable parts on top of `encoder`.
    pub fn new(config: ModelConfig, encoder: Encoder, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng_for(init_seed, "adapter");
        let adapter = Adapter::new(&config, &mut rng);
        let mut rng = seed::rng_for(init_seed, "proj");
        let proj = ProjectionHead::new(&config, &mut rng);
        let mut rng = seed::rng_for(init_seed, "decoder");
        let decoder = Decoder::new(&config, config.num_classes, &mut rng);
        Ok(SegModel {
            config,
            encoder,
            adapter,
            proj,
            decoder,
        })
    }

    pub fn trainable_params(&self) -> usize {
        self.adapter.params.num_scalars() + self.proj.params.num_scalars() + self.decoder.params.num_scalars()
    }

    pub fn total_params(&self) -> usize {
        self.encoder.params.num_scalars() + self.trainable_params()
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundModel<'t> {
        BoundModel {
            adapter: self.adapter.params.bind(tape, true),
            proj: self.proj.params.bind(tape, true),
            decoder: self.decoder.params.bind(tape, true),
        }
    }

    /// Stacks images into an `[N,1,S,S]` tensor.
    pub fn image_batch(&self, images: &[&[f64]]) -> Result<Tensor> {
        let s = self.config.image_size;
        let mut data = Vec::with_capacity(images.len() * s * s);
        for img in images {
            if img.len() != s * s {
                return Err(ModelError::ImageSize {
                    expected: s,
                    actual: img.len(),
                });
            }
            data.extend_from_slice(img);
        }
        Ok(Tensor::from_vec(data, &[images.len(), 1, s, s])?)
    }

    /// Frozen-encoder features for a batch of images, no tape kept.
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        if !self.encoder.frozen {
            return Err(ModelError::NotFrozen);
        }
        let tape = Tape::new();
        let x = tape.constant(images.clone());
        Ok(self.encoder.forward_frozen(&tape, x)?.to_tensor())
    }

    /// Encoder applied on a tape with its weights as constants, so gradients
    /// can reach the input but never the encoder.
    pub fn encode_var<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        if !self.encoder.frozen {
            return Err(ModelError::NotFrozen);
        }
        self.encoder.forward_frozen(tape, x)
    }

    /// encode → adapt → {decode, project} with one shared `f`.
    pub fn forward_full<'t>(
        &self,
        tape: &'t Tape,
        bound: &BoundModel<'t>,
        raw: Var<'t>,
        film: Option<&FiLMParams>,
    ) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        let f = self.adapter.forward(bound.adapter.as_slice(), raw)?;
        let logits = self.decoder.forward(tape, &bound.decoder, f, film)?;
        let z = self.proj.forward(&bound.proj, f)?;
        Ok((f, logits, z))
    }

    /// Logits for precomputed encoder features, evaluated with constants.
    pub fn logits_from_raw(&self, raw: &Tensor, film: Option<&FiLMParams>) -> Result<Tensor> {
        let tape = Tape::new();
        let f = self.adapt_const(&tape, raw)?;
        let dec = self.decoder.params.bind(&tape, false);
        Ok(self.decoder.forward(&tape, &dec, f, film)?.to_tensor())
    }

    /// Adapter features for precomputed encoder features.
    pub fn features_from_raw(&self, raw: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        Ok(self.adapt_const(&tape, raw)?.to_tensor())
    }

    fn adapt_const<'t>(&self, tape: &'t Tape, raw: &Tensor) -> Result<Var<'t>> {
        let ad = self.adapter.params.bind(tape, false);
        self.adapter.forward(&ad, tape.constant(raw.clone()))
    }

    /// Decoder logits for adapter features `f` under `film`.
    pub fn decode_features(&self, f: &Tensor, film: Option<&FiLMParams>) -> Result<Tensor> {
        let tape = Tape::new();
        let dec = self.decoder.params.bind(&tape, false);
        Ok(self
            .decoder
            .forward(&tape, &dec, tape.constant(f.clone()), film)?
            .to_tensor())
    }

    /// Unit image embeddings for precomputed encoder features.
    pub fn embed_from_raw(&self, raw: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let f = self.adapt_const(&tape, raw)?;
        let p = self.proj.params.bind(&tape, false);
        Ok(self.proj.forward(&p, f)?.to_tensor())
    }

    /// Full inference from images.
    pub fn predict_logits(&self, images: &Tensor, film: Option<&FiLMParams>) -> Result<Tensor> {
        self.logits_from_raw(&self.encode(images)?, film)
    }

    pub fn identity_film(&self) -> FiLMParams {
        FiLMParams::identity(&self.config.decoder_channels)
    }
}

/// Per-pixel argmax over the class axis of `[N,K,S,S]` logits.
pub fn argmax_masks(logits: &Tensor) -> Vec<Vec<u8>> {
    let s = logits.shape();
    let (n, k, hw) = (s[0], s[1], s[2] * s[3]);
    let d = logits.data();
    (0..n)
        .map(|b| {
            (0..hw)
                .map(|p| {
                    let mut best = 0;
                    for c in 1..k {
                        if d[(b * k + c) * hw + p] > d[(b * k + best) * hw + p] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests;
