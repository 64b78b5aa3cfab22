//! Training objectives: soft Dice + cross-entropy segmentation loss, the
//! cosine disentanglement penalty, and the GRL and MixStyle baselines.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::GrlHead;
use crate::styletext::{describe, BinThresholds};
use crate::synthgen::StyleDescriptor;
use crate::tensor::{channel_moments, Tape, Tensor, TensorError, Var};

pub const DICE_EPS: f64 = 1e-6;
const NORMALIZED_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("probabilities do not sum to 1 at pixel {pixel} (sum {sum})")]
    NotNormalized { pixel: usize, sum: f64 },
    #[error("{what} is not unit norm (norm {norm})")]
    NotUnit { what: &'static str, norm: f64 },
    #[error("mask value {value} outside 0..{classes}")]
    MaskLabel { value: u8, classes: usize },
    #[error("mask batch has {masks} masks of {pixels} pixels, expected {expected_masks} of {expected_pixels}")]
    MaskShape {
        masks: usize,
        pixels: usize,
        expected_masks: usize,
        expected_pixels: usize,
    },
    #[error("lambda must be non-negative, got {0}")]
    NegativeLambda(f64),
    #[error("domain-adversarial training needs at least two domains in the batch labels")]
    SingleDomain,
    #[error("mixstyle needs a batch of at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("mixstyle alpha must be positive, got {0}")]
    Alpha(f64),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// One-hot `[N,K,H,W]` tensor for `masks`, laid out like `logits`.
pub fn one_hot(masks: &[&[u8]], shape: &[usize]) -> Result<Tensor> {
    let (n, k, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    if masks.len() != n || masks.iter().any(|m| m.len() != hw) {
        return Err(LossError::MaskShape {
            masks: masks.len(),
            pixels: masks.first().map_or(0, |m| m.len()),
            expected_masks: n,
            expected_pixels: hw,
        });
    }
    let mut data = vec![0.0; n * k * hw];
    for (b, m) in masks.iter().enumerate() {
        for (p, &c) in m.iter().enumerate() {
            if c as usize >= k {
                return Err(LossError::MaskLabel { value: c, classes: k });
            }
            data[(b * k + c as usize) * hw + p] = 1.0;
        }
    }
    Ok(Tensor::from_vec(data, shape)?)
}

fn check_normalized(probs: &Tensor) -> Result<()> {
    let s = probs.shape();
    if s.len() != 4 {
        return Err(TensorError::Rank {
            op: "segmentation loss",
            expected: 4,
            shape: s.to_vec(),
        }
        .into());
    }
    let (n, k, hw) = (s[0], s[1], s[2] * s[3]);
    let d = probs.data();
    for b in 0..n {
        for p in 0..hw {
            let sum: f64 = (0..k).map(|c| d[(b * k + c) * hw + p]).sum();
            if (sum - 1.0).abs() > NORMALIZED_TOL {
                return Err(LossError::NotNormalized { pixel: b * hw + p, sum });
            }
        }
    }
    Ok(())
}

/// `1 - mean_{n,k} (2 Σ p g + ε) / (Σ p + Σ g + ε)` over `[N,K,H,W]` probabilities.
pub fn dice_loss<'t>(probs: Var<'t>, masks: &[&[u8]]) -> Result<Var<'t>> {
    check_normalized(&probs.value())?;
    let g = probs.tape().constant(one_hot(masks, &probs.shape())?);
    dice_with_onehot(probs, g)
}

fn dice_with_onehot<'t>(probs: Var<'t>, g: Var<'t>) -> Result<Var<'t>> {
    let inter = probs.mul(g)?.sum(&[2, 3])?;
    let denom = probs.sum(&[2, 3])?.add(g.sum(&[2, 3])?)?.shift(DICE_EPS);
    let ratio = inter.scale(2.0).shift(DICE_EPS).div(denom)?;
    Ok(ratio.mean_all().neg().shift(1.0))
}

/// Mean over pixels of `-log p_true`, with `log` floored.
pub fn bce_loss<'t>(probs: Var<'t>, masks: &[&[u8]]) -> Result<Var<'t>> {
    check_normalized(&probs.value())?;
    let g = probs.tape().constant(one_hot(masks, &probs.shape())?);
    bce_with_onehot(probs, g)
}

fn bce_with_onehot<'t>(probs: Var<'t>, g: Var<'t>) -> Result<Var<'t>> {
    let s = probs.shape();
    let pixels = (s[0] * s[2] * s[3]) as f64;
    Ok(probs.log().mul(g)?.sum_all().scale(-1.0 / pixels))
}

/// Softmax over classes, then `0.5 dice + 0.5 bce`.
pub fn seg_loss<'t>(logits: Var<'t>, masks: &[&[u8]]) -> Result<Var<'t>> {
    let probs = logits.softmax();
    let g = probs.tape().constant(one_hot(masks, &probs.shape())?);
    Ok(dice_with_onehot(probs, g)?
        .scale(0.5)
        .add(bce_with_onehot(probs, g)?.scale(0.5))?)
}

/// How the image/style cosine enters the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DisVariant {
    /// The signed cosine, as written.
    #[default]
    Signed,
    /// Squared cosine; zero only at orthogonality.
    Squared,
}

fn check_unit(what: &'static str, z: &Tensor) -> Result<()> {
    let d = *z.shape().last().unwrap_or(&1);
    for row in z.data().chunks(d.max(1)) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(LossError::NotUnit { what, norm });
        }
    }
    Ok(())
}

/// Batch mean of row-wise `z_image · z_style` (or its square).
pub fn dis_loss<'t>(z_image: Var<'t>, z_style: Var<'t>, variant: DisVariant) -> Result<Var<'t>> {
    check_unit("z_image", &z_image.value())?;
    check_unit("z_style", &z_style.value())?;
    let prod = z_image.mul(z_style)?;
    let cos = match z_image.shape().len() {
        2 => prod.sum(&[1])?,
        _ => prod.sum_all(),
    };
    Ok(match variant {
        DisVariant::Signed => cos.mean_all(),
        DisVariant::Squared => cos.mul(cos)?.mean_all(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_seg: f64,
    pub l_dis: f64,
    pub l_total: f64,
    pub lambda: f64,
    pub aux: BTreeMap<String, f64>,
}

/// Differentiable total with its scalar breakdown.
pub struct TotalLoss<'t> {
    pub total: Var<'t>,
    pub report: LossReport,
}

impl<'t> TotalLoss<'t> {
    /// Adds a baseline term to the objective and records it under `name`.
    pub fn add_aux(&mut self, name: &str, term: Var<'t>) -> Result<()> {
        self.total = self.total.add(term)?;
        let v = term.item();
        self.report.aux.insert(name.to_string(), v);
        self.report.l_total += v;
        Ok(())
    }
}

/// `l_seg + lambda * l_dis`.
pub fn total_loss<'t>(
    logits: Var<'t>,
    masks: &[&[u8]],
    z_image: Var<'t>,
    z_style: Var<'t>,
    lambda: f64,
    variant: DisVariant,
) -> Result<TotalLoss<'t>> {
    if !(lambda >= 0.0) {
        return Err(LossError::NegativeLambda(lambda));
    }
    let seg = seg_loss(logits, masks)?;
    let dis = dis_loss(z_image, z_style, variant)?;
    let total = seg.add(dis.scale(lambda))?;
    let (l_seg, l_dis) = (seg.item(), dis.item());
    Ok(TotalLoss {
        total,
        report: LossReport {
            l_seg,
            l_dis,
            l_total: l_seg + lambda * l_dis,
            lambda,
            aux: BTreeMap::new(),
        },
    })
}

/// Mean cross-entropy of `logits` `[N,K]` against integer labels.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let s = logits.shape();
    let (n, k) = (s[0], s[1]);
    let mut onehot = vec![0.0; n * k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(LossError::MaskLabel {
                value: l.min(255) as u8,
                classes: k,
            });
        }
        onehot[i * k + l] = 1.0;
    }
    let g = logits.tape().constant(Tensor::from_vec(onehot, &[n, k])?);
    Ok(logits.softmax().log().mul(g)?.sum_all().scale(-1.0 / n as f64))
}

/// Cross-entropy of the domain head on gradient-reversed `f`. The head
/// itself learns at full strength; `f` receives `-lambda_grl` times its
/// gradient.
pub fn grl_domain_loss<'t>(
    f: Var<'t>,
    labels: &[usize],
    head: &GrlHead,
    weights: &[Var<'t>],
    lambda_grl: f64,
) -> Result<Var<'t>> {
    if head.num_domains < 2 {
        return Err(LossError::SingleDomain);
    }
    let logits = head.forward(weights, f, lambda_grl).map_err(|e| match e {
        crate::model::ModelError::Tensor(t) => LossError::Tensor(t),
        other => unreachable!("head forward only fails on tensor errors: {other}"),
    })?;
    cross_entropy(logits, labels)
}

/// Pseudo-domain label per descriptor: the distinct style-bin signatures,
/// numbered in sorted order.
pub fn pseudo_domains(descriptors: &[&StyleDescriptor], bins: &BinThresholds) -> Result<(Vec<usize>, Vec<String>)> {
    let keys: Vec<String> = descriptors.iter().map(|d| describe(d, bins).join("|")).collect();
    let names: Vec<String> = keys.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if names.len() < 2 {
        return Err(LossError::SingleDomain);
    }
    let labels = keys
        .iter()
        .map(|k| names.binary_search(k).expect("key listed"))
        .collect();
    Ok((labels, names))
}

/// Mixing coefficients and partners for one MixStyle application.
#[derive(Debug, Clone, PartialEq)]
pub struct MixPlan {
    pub lambdas: Vec<f64>,
    pub perm: Vec<usize>,
}

/// Draws a plan with probability 0.5, otherwise `None` (batch untouched).
pub fn mixstyle_plan(n: usize, alpha: f64, rng: &mut impl Rng) -> Result<Option<MixPlan>> {
    if n < 2 {
        return Err(LossError::BatchTooSmall(n));
    }
    if !(alpha > 0.0) {
        return Err(LossError::Alpha(alpha));
    }
    if rng.random::<f64>() >= 0.5 {
        return Ok(None);
    }
    let beta = Beta::new(alpha, alpha).map_err(|_| LossError::Alpha(alpha))?;
    let lambdas = (0..n).map(|_| beta.sample(rng)).collect();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    Ok(Some(MixPlan { lambdas, perm }))
}

/// `(λσ_j + (1-λ)σ_i) (x_i - μ_i)/σ_i + λμ_j + (1-λ)μ_i` with `j = perm[i]`
/// and statistics treated as constants.
pub fn mixstyle_apply<'t>(x: Var<'t>, plan: &MixPlan) -> Result<Var<'t>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(TensorError::Rank {
            op: "mixstyle",
            expected: 4,
            shape: s,
        }
        .into());
    }
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    if n < 2 {
        return Err(LossError::BatchTooSmall(n));
    }
    if hw < 2 {
        return Err(TensorError::DegenerateSpatial(hw).into());
    }
    let (mu, sig) = channel_moments(x.value().data(), hw);
    let mut scale = vec![0.0; n * c];
    let mut shift = vec![0.0; n * c];
    for i in 0..n {
        let (j, l) = (plan.perm[i], plan.lambdas[i]);
        for ch in 0..c {
            let (a, b) = (i * c + ch, j * c + ch);
            let sig_mix = l * sig[b] + (1.0 - l) * sig[a];
            let mu_mix = l * mu[b] + (1.0 - l) * mu[a];
            scale[a] = sig_mix / sig[a];
            shift[a] = mu_mix - mu[a] * scale[a];
        }
    }
    let tape: &Tape = x.tape();
    let scale = tape.constant(Tensor::from_vec(scale, &[n, c])?);
    let shift = tape.constant(Tensor::from_vec(shift, &[n, c])?);
    Ok(x.instance_affine(scale, shift)?)
}

/// Samples a plan and applies it; returns `x` itself when the coin says no.
pub fn mixstyle_augment<'t>(x: Var<'t>, alpha: f64, rng: &mut impl Rng) -> Result<Var<'t>> {
    match mixstyle_plan(x.shape()[0], alpha, rng)? {
        Some(plan) => mixstyle_apply(x, &plan),
        None => Ok(x),
    }
}

#[cfg(test)]
mod tests;
