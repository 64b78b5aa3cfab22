//! Frozen style-text embedder: a descriptor is read into categorical tokens
//! and each token maps to a fixed pseudo-random direction. The embedding is
//! the normalized sum of token directions.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::seed;
use crate::synthgen::{Artifact, Modality, NoiseKind, StyleDescriptor};

pub const DEFAULT_STYLE_DIM: usize = 64;

#[derive(Debug, Error, PartialEq)]
pub enum StyleTextError {
    #[error("token {0:?} is not in the codebook")]
    UnknownToken(String),
    #[error("no tokens to embed")]
    Empty,
}

/// Numeric cut points that turn descriptor values into named bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinThresholds {
    /// Below is "low", above is "high".
    pub contrast: (f64, f64),
    /// Below the first value noise reads as "none"; the second splits low/high.
    pub noise: (f64, f64),
    /// none / mild / strong cut points.
    pub bias: (f64, f64),
}

impl Default for BinThresholds {
    fn default() -> Self {
        BinThresholds {
            contrast: (0.8, 1.3),
            noise: (0.02, 0.1),
            bias: (0.1, 0.35),
        }
    }
}

/// Canonical token list, one token per active attribute.
pub fn describe(d: &StyleDescriptor, bins: &BinThresholds) -> Vec<String> {
    let contrast = if d.contrast < bins.contrast.0 {
        "low"
    } else if d.contrast > bins.contrast.1 {
        "high"
    } else {
        "normal"
    };
    let noise = if d.noise_kind == NoiseKind::None || d.noise_level < bins.noise.0 {
        "none".to_string()
    } else {
        let level = if d.noise_level < bins.noise.1 { "low" } else { "high" };
        format!("{}_{level}", d.noise_kind)
    };
    let bias = if d.bias_strength < bins.bias.0 {
        "none"
    } else if d.bias_strength < bins.bias.1 {
        "mild"
    } else {
        "strong"
    };
    let mut tokens = vec![
        format!("modality:{}", d.modality),
        format!("contrast:{contrast}"),
        format!("noise:{noise}"),
        format!("bias:{bias}"),
    ];
    tokens.extend(d.artifacts.iter().map(|a| format!("artifact:{a}")));
    tokens
}

/// [`describe`] with each token independently dropped with probability `p`,
/// always keeping at least one token.
pub fn describe_noisy(d: &StyleDescriptor, bins: &BinThresholds, p: f64, rng: &mut impl Rng) -> Vec<String> {
    let tokens = describe(d, bins);
    if p <= 0.0 {
        return tokens;
    }
    let kept: Vec<String> = tokens
        .iter()
        .filter(|_| rng.random::<f64>() >= p)
        .cloned()
        .collect();
    if kept.is_empty() {
        vec![tokens[0].clone()]
    } else {
        kept
    }
}

/// Every token [`describe`] can emit.
pub fn vocabulary() -> Vec<String> {
    let mut v: Vec<String> = Modality::ALL.iter().map(|m| format!("modality:{m}")).collect();
    v.extend(["low", "normal", "high"].map(|c| format!("contrast:{c}")));
    v.push("noise:none".into());
    for k in [NoiseKind::Gaussian, NoiseKind::Speckle] {
        for level in ["low", "high"] {
            v.push(format!("noise:{k}_{level}"));
        }
    }
    v.extend(["none", "mild", "strong"].map(|b| format!("bias:{b}")));
    v.extend(Artifact::ALL.iter().map(|a| format!("artifact:{a}")));
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeCodebook {
    pub seed: u64,
    pub dim: usize,
    pub bins: BinThresholds,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl AttributeCodebook {
    /// I.i.d. standard normal vectors per token, each normalized.
    pub fn new(seed: u64, dim: usize) -> Self {
        let vectors = vocabulary()
            .into_iter()
            .map(|token| {
                let mut rng = seed::rng(seed, &[seed::tag(&token)]);
                let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter_mut().for_each(|x| *x /= n);
                (token, v)
            })
            .collect();
        AttributeCodebook {
            seed,
            dim,
            bins: BinThresholds::default(),
            vectors,
        }
    }

    pub fn vector(&self, token: &str) -> Option<&[f64]> {
        self.vectors.get(token).map(Vec::as_slice)
    }

    pub fn tokens(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.vectors.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub(crate) fn from_parts(seed: u64, dim: usize, bins: BinThresholds, vectors: BTreeMap<String, Vec<f64>>) -> Self {
        AttributeCodebook {
            seed,
            dim,
            bins,
            vectors,
        }
    }

    /// SHA-256 over every token and vector bit pattern.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update((self.dim as u64).to_le_bytes());
        for (token, v) in &self.vectors {
            h.update(token.as_bytes());
            for x in v {
                h.update(x.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    pub fn embed_descriptor(&self, d: &StyleDescriptor) -> StyleEmbedding {
        embed_style(&describe(d, &self.bins), self).expect("describe emits vocabulary tokens")
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Unit-norm style vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleEmbedding(pub Vec<f64>);

impl StyleEmbedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn cosine(&self, other: &StyleEmbedding) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

pub fn embed_style<S: AsRef<str>>(tokens: &[S], cb: &AttributeCodebook) -> Result<StyleEmbedding, StyleTextError> {
    if tokens.is_empty() {
        return Err(StyleTextError::Empty);
    }
    let mut acc = vec![0.0; cb.dim];
    // Sort first so the float sum does not depend on token order.
    let mut sorted: Vec<&str> = tokens.iter().map(AsRef::as_ref).collect();
    sorted.sort_unstable();
    for t in sorted {
        let v = cb
            .vector(t)
            .ok_or_else(|| StyleTextError::UnknownToken(t.to_string()))?;
        acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
    }
    let n = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n <= crate::tensor::NORM_EPS {
        return Err(StyleTextError::Empty);
    }
    acc.iter_mut().for_each(|x| *x /= n);
    Ok(StyleEmbedding(acc))
}
