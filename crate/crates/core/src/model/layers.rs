use rand::Rng;

use super::film::FiLMParams;
use super::params::{he_normal, ParamStore};
use super::{ModelConfig, Result};
use crate::tensor::{Tape, Tensor, Var};

fn conv<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
    Ok(x.conv2d(w, stride, pad)?.add(b)?)
}

fn dense<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    Ok(x.matmul(w)?.add(b)?)
}

fn push_conv(p: &mut ParamStore, rng: &mut impl Rng, name: &str, c_out: usize, c_in: usize, k: usize, gain: f64) {
    p.push(format!("{name}.w"), he_normal(rng, &[c_out, c_in, k, k], c_in * k * k, gain));
    p.push(format!("{name}.b"), Tensor::zeros(&[c_out]));
}

fn push_dense(p: &mut ParamStore, rng: &mut impl Rng, name: &str, d_in: usize, d_out: usize) {
    p.push(format!("{name}.w"), he_normal(rng, &[d_in, d_out], d_in, 1.0));
    p.push(format!("{name}.b"), Tensor::zeros(&[d_out]));
}

/// Stride-2 conv stages, each followed by residual 3x3 blocks
/// `x <- relu(x + conv(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub params: ParamStore,
    pub channels: Vec<usize>,
    pub blocks: Vec<usize>,
    pub frozen: bool,
}

impl Encoder {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let mut params = ParamStore::new();
        let mut c_in = 1;
        for (s, (&c, &nb)) in cfg.encoder_channels.iter().zip(&cfg.encoder_blocks).enumerate() {
            push_conv(&mut params, rng, &format!("enc{s}.down"), c, c_in, 3, 1.0);
            for b in 0..nb {
                // Residual branches start small so deep stacks stay stable.
                push_conv(&mut params, rng, &format!("enc{s}.block{b}"), c, c, 3, 0.3);
            }
            c_in = c;
        }
        Encoder {
            params,
            channels: cfg.encoder_channels.clone(),
            blocks: cfg.encoder_blocks.clone(),
            frozen: false,
        }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn forward<'t>(&self, w: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        let mut h = x;
        let mut i = 0;
        for &nb in &self.blocks {
            h = conv(h, w[i], w[i + 1], 2, 1)?.relu();
            i += 2;
            for _ in 0..nb {
                h = h.add(conv(h, w[i], w[i + 1], 1, 1)?)?.relu();
                i += 2;
            }
        }
        Ok(h)
    }

    pub(crate) fn forward_frozen<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let w = self.params.bind(tape, false);
        self.forward(&w, x)
    }
}

/// Residual pair of 1x1 convs; the second is zero-initialized so the adapter
/// starts as the identity map.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub params: ParamStore,
}

impl Adapter {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let c = cfg.feature_channels();
        let mut params = ParamStore::new();
        push_conv(&mut params, rng, "adapter.0", c, c, 1, 1.0);
        params.push("adapter.1.w", Tensor::zeros(&[c, c, 1, 1]));
        params.push("adapter.1.b", Tensor::zeros(&[c]));
        Adapter { params }
    }

    pub fn forward<'t>(&self, w: &[Var<'t>], raw: Var<'t>) -> Result<Var<'t>> {
        let h = conv(raw, w[0], w[1], 1, 0)?.relu();
        Ok(raw.add(conv(h, w[2], w[3], 1, 0)?)?)
    }
}

/// Global average pool, two-layer MLP, L2 normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub params: ParamStore,
}

impl ProjectionHead {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let mut params = ParamStore::new();
        push_dense(&mut params, rng, "proj.0", cfg.feature_channels(), cfg.proj_hidden);
        push_dense(&mut params, rng, "proj.1", cfg.proj_hidden, cfg.style_dim);
        ProjectionHead { params }
    }

    pub fn forward<'t>(&self, w: &[Var<'t>], f: Var<'t>) -> Result<Var<'t>> {
        let pooled = f.mean(&[2, 3])?;
        let h = dense(pooled, w[0], w[1])?.relu();
        Ok(dense(h, w[2], w[3])?.l2_normalize()?)
    }
}

/// Nearest-neighbour x2 upsampling stages, each `conv3x3 -> relu -> FiLM`,
/// then a 1x1 conv to class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub params: ParamStore,
    pub widths: Vec<usize>,
}

impl Decoder {
    pub fn new(cfg: &ModelConfig, out_channels: usize, rng: &mut impl Rng) -> Self {
        let mut params = ParamStore::new();
        let mut c_in = cfg.feature_channels();
        for (i, &c) in cfg.decoder_channels.iter().enumerate() {
            push_conv(&mut params, rng, &format!("dec{i}"), c, c_in, 3, 1.0);
            c_in = c;
        }
        push_conv(&mut params, rng, "dec.out", out_channels, c_in, 1, 1.0);
        Decoder {
            params,
            widths: cfg.decoder_channels.clone(),
        }
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        w: &[Var<'t>],
        f: Var<'t>,
        film: Option<&FiLMParams>,
    ) -> Result<Var<'t>> {
        if let Some(film) = film {
            film.validate(&self.widths)?;
        }
        let mut h = f;
        for i in 0..self.widths.len() {
            h = self.stage(w, h, i)?;
            if let Some(film) = film {
                let (g, b) = film.layer(i);
                h = h.mul(tape.constant(g))?.add(tape.constant(b))?;
            }
        }
        self.head(w, h)
    }

    /// Stage `i` up to, not including, its FiLM.
    pub(crate) fn stage<'t>(&self, w: &[Var<'t>], h: Var<'t>, i: usize) -> Result<Var<'t>> {
        Ok(conv(h.upsample2x()?, w[2 * i], w[2 * i + 1], 1, 1)?.relu())
    }

    /// `[K, C_last, 1, 1]` weight of the output conv.
    pub fn out_weight(&self) -> &Tensor {
        self.params.get(2 * self.widths.len())
    }

    /// Final 1x1 conv to logits.
    pub(crate) fn head<'t>(&self, w: &[Var<'t>], h: Var<'t>) -> Result<Var<'t>> {
        let n = self.widths.len();
        conv(h, w[2 * n], w[2 * n + 1], 1, 0)
    }
}

/// Domain classifier behind a gradient reversal layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GrlHead {
    pub params: ParamStore,
    pub num_domains: usize,
}

impl GrlHead {
    pub fn new(cfg: &ModelConfig, num_domains: usize, rng: &mut impl Rng) -> Self {
        let mut params = ParamStore::new();
        push_dense(&mut params, rng, "grl.0", cfg.feature_channels(), cfg.grl_hidden);
        push_dense(&mut params, rng, "grl.1", cfg.grl_hidden, num_domains);
        GrlHead { params, num_domains }
    }

    /// Domain logits `[N, num_domains]`; gradients into `f` are scaled by `-lambda`.
    pub fn forward<'t>(&self, w: &[Var<'t>], f: Var<'t>, lambda: f64) -> Result<Var<'t>> {
        let pooled = f.mean(&[2, 3])?.grad_reverse(lambda);
        let h = dense(pooled, w[0], w[1])?.relu();
        dense(h, w[2], w[3])
    }
}
