use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{canonical_command, CompactFilm, CorrectionCommand, Result};
use crate::losses::dice_loss;
use crate::metrics::dice_score;
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::model::{argmax_masks, FiLMParams, SegModel};
use crate::seed;
use crate::synthgen::{corrupt_for_intervention, CorruptionKind, Sample};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub method: SearchMethod,
    pub sweeps: usize,
    /// Points per grid, for the first pass and for each refinement.
    pub grid: usize,
    pub refinements: usize,
    pub gamma_range: (f64, f64),
    pub beta_range: (f64, f64),
    /// Adam steps and rate for `SearchMethod::SoftDice`.
    pub steps: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMethod {
    #[default]
    CoordinateDescent,
    /// Adam on the soft Dice loss of the compact FiLM.
    SoftDice,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            method: SearchMethod::CoordinateDescent,
            sweeps: 3,
            grid: 11,
            refinements: 2,
            gamma_range: (0.25, 2.5),
            beta_range: (-1.0, 1.0),
            steps: 60,
            lr: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub kinds: Vec<CorruptionKind>,
    pub n_per_kind: usize,
    pub severity: (f64, f64),
    pub seed: u64,
    pub search: SearchConfig,
    /// Pairs must gain strictly more than this.
    pub min_gain: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            kinds: CorruptionKind::ALL.to_vec(),
            n_per_kind: 25,
            severity: (0.4, 1.0),
            seed: 0,
            search: SearchConfig::default(),
            min_gain: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionPair {
    pub kind: CorruptionKind,
    pub severity: f64,
    pub sample_index: usize,
    pub content_seed: u64,
    pub command: CorrectionCommand,
    pub target: CompactFilm,
    pub target_film: FiLMParams,
    pub base_dice: f64,
    pub achieved_dice_gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthOutcome {
    pub pairs: Vec<InterventionPair>,
    pub searched: usize,
    /// Searches that found no gain above `min_gain`.
    pub skipped: usize,
}

/// Mean foreground Dice of an argmax prediction.
pub(crate) fn fg_dice(pred: &[u8], truth: &[u8], num_classes: usize) -> f64 {
    (1..num_classes as u8).map(|k| dice_score(pred, truth, k)).sum::<f64>() / (num_classes - 1) as f64
}

/// Coordinate descent over the compact FiLM of one sample, maximizing
/// Dice against `truth`. Returns the best point, the identity score and
/// the best score. Ties keep the current point, so the search never moves
/// without a strict gain.
pub fn search_film(
    model: &SegModel,
    raw: &Tensor,
    truth: &[u8],
    cfg: &SearchConfig,
) -> Result<(CompactFilm, f64, f64)> {
    let k = model.config.num_classes;
    let dec = &model.decoder;
    let stages = dec.widths.len();
    let f = model.features_from_raw(raw)?;

    // Pre-FiLM activation of `stage` under the current FiLM of earlier stages.
    let pre = |cur: &CompactFilm, stage: usize| -> Result<Tensor> {
        let tape = Tape::new();
        let w = dec.params.bind(&tape, false);
        let mut h = tape.constant(f.clone());
        for s in 0..stage {
            h = dec.stage(&w, h, s)?.scale(cur.gamma(s)).shift(cur.beta(s));
        }
        Ok(dec.stage(&w, h, stage)?.to_tensor())
    };
    let score_from = |cur: &CompactFilm, stage: usize, pre_act: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let w = dec.params.bind(&tape, false);
        let mut h = tape.constant(pre_act.clone()).scale(cur.gamma(stage)).shift(cur.beta(stage));
        for s in stage + 1..stages {
            h = dec.stage(&w, h, s)?.scale(cur.gamma(s)).shift(cur.beta(s));
        }
        let logits = dec.head(&w, h)?.to_tensor();
        Ok(fg_dice(&argmax_masks(&logits)[0], truth, k))
    };

    let mut cur = CompactFilm::identity(stages);
    let base = score_from(&cur, 0, &pre(&cur, 0)?)?;
    let mut best = base;
    let g = cfg.grid.max(2);
    for _ in 0..cfg.sweeps {
        for d in 0..2 * stages {
            let stage = d / 2;
            let (lo, hi) = if d % 2 == 0 { cfg.gamma_range } else { cfg.beta_range };
            let pre_act = pre(&cur, stage)?;
            let mut span = (lo, hi);
            let mut step = (hi - lo) / (g - 1) as f64;
            for _ in 0..=cfg.refinements {
                for i in 0..g {
                    let v = (span.0 + step * i as f64).clamp(lo, hi);
                    if v == cur.0[d] {
                        continue;
                    }
                    let mut cand = cur.clone();
                    cand.0[d] = v;
                    let s = score_from(&cand, stage, &pre_act)?;
                    if s > best {
                        best = s;
                        cur = cand;
                    }
                }
                span = (cur.0[d] - step, cur.0[d] + step);
                step = 2.0 * step / (g - 1) as f64;
            }
        }
    }
    Ok((cur, base, best))
}

/// Gradient descent on the soft Dice loss over the compact FiLM, keeping
/// the iterate with the best hard Dice. Same return shape as `search_film`.
pub fn search_film_soft(
    model: &SegModel,
    raw: &Tensor,
    truth: &[u8],
    cfg: &SearchConfig,
) -> Result<(CompactFilm, f64, f64)> {
    let k = model.config.num_classes;
    let dec = &model.decoder;
    let stages = dec.widths.len();
    let f = model.features_from_raw(raw)?;
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };

    let mut cur = CompactFilm::identity(stages);
    let mut params: Vec<Tensor> = cur.0.iter().map(|&v| Tensor::scalar(v)).collect();
    let mut state = AdamState::new(&params);
    let mut best_point = cur.clone();
    let mut base = None;
    let mut best = f64::NEG_INFINITY;
    for step in 0..=cfg.steps {
        let tape = Tape::new();
        let w = dec.params.bind(&tape, false);
        let p: Vec<_> = params.iter().map(|t| tape.param(t.clone())).collect();
        let mut h = tape.constant(f.clone());
        for s in 0..stages {
            h = dec.stage(&w, h, s)?.mul(p[2 * s])?.add(p[2 * s + 1])?;
        }
        let logits = dec.head(&w, h)?;
        let score = fg_dice(&argmax_masks(&logits.to_tensor())[0], truth, k);
        base.get_or_insert(score);
        if score > best {
            best = score;
            best_point = cur.clone();
        }
        if step == cfg.steps {
            break;
        }
        let grads = dice_loss(logits.softmax(), &[truth])?.backward()?;
        let g: Vec<_> = p.iter().map(|&v| grads.wrt(v).cloned()).collect();
        adam_step(&mut params, &g, &mut state, &adam)?;
        for (d, t) in params.iter_mut().enumerate() {
            let (lo, hi) = if d % 2 == 0 { cfg.gamma_range } else { cfg.beta_range };
            *t = Tensor::scalar(t.item().clamp(lo, hi));
            cur.0[d] = t.item();
        }
    }
    let base = base.unwrap_or(best);
    if best <= base {
        best_point = CompactFilm::identity(stages);
    }
    Ok((best_point, base, best))
}

/// Builds (corruption, command, searched FiLM) pairs from `samples`.
pub fn synth_pairs(model: &SegModel, samples: &[Sample], cfg: &SynthConfig) -> Result<SynthOutcome> {
    let k = model.config.num_classes;
    let widths = &model.decoder.widths;
    let mut pairs = Vec::new();
    let mut searched = 0;
    let mut skipped = 0;
    for &kind in &cfg.kinds {
        for i in 0..cfg.n_per_kind {
            let mut rng = seed::rng(cfg.seed, &[seed::tag(kind.as_str()), i as u64]);
            let sample_index = rng.random_range(0..samples.len());
            let severity = rng.random_range(cfg.severity.0..=cfg.severity.1);
            let (corrupted, _) = corrupt_for_intervention(&samples[sample_index], kind, severity)?;
            let img = corrupted.image_f64();
            let raw = model.encode(&model.image_batch(&[&img])?)?;
            let (target, base, best) = match cfg.search.method {
                SearchMethod::CoordinateDescent => search_film(model, &raw, &corrupted.mask, &cfg.search)?,
                SearchMethod::SoftDice => search_film_soft(model, &raw, &corrupted.mask, &cfg.search)?,
            };
            searched += 1;
            let gain = best - base;
            if gain <= cfg.min_gain {
                skipped += 1;
                continue;
            }
            pairs.push(InterventionPair {
                kind,
                severity,
                sample_index,
                content_seed: corrupted.content_seed,
                command: canonical_command(kind, severity, k),
                target_film: target.expand(widths)?,
                target,
                base_dice: base,
                achieved_dice_gain: gain,
            });
        }
    }
    Ok(SynthOutcome {
        pairs,
        searched,
        skipped,
    })
}
