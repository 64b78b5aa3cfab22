//! Paired intervention study: each corrupted case is segmented once with
//! identity FiLM (arm A) and once with the reasoner's FiLM for the
//! canonical command of its known cause (arm B).

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{canonical_command, FilmPredictor, Result};
use crate::metrics::{EvalRecord, Stat};
use crate::model::{argmax_masks, FiLMParams, SegModel};
use crate::seed;
use crate::styletext::hex;
use crate::synthgen::{corrupt_for_intervention, CorruptionKind, Sample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub n_cases: usize,
    pub kinds: Vec<CorruptionKind>,
    pub severity: (f64, f64),
    pub seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            n_cases: 50,
            kinds: CorruptionKind::ALL.to_vec(),
            severity: (0.3, 1.0),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyCase {
    pub case: usize,
    pub sample_index: usize,
    pub domain: String,
    pub kind: CorruptionKind,
    pub severity: f64,
    pub command: String,
    /// SHA-256 of the corrupted image both arms segment.
    pub input_hash: String,
    pub dice_a: f64,
    pub dice_b: f64,
    pub hd95_a: Option<f64>,
    pub hd95_b: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionStudy {
    pub config: StudyConfig,
    pub cases: Vec<StudyCase>,
    pub dice_a: Stat,
    pub dice_b: Stat,
    /// Over cases where both arms have a defined HD95.
    pub hd95_a: Option<Stat>,
    pub hd95_b: Option<Stat>,
    pub hd95_cases: usize,
    /// Cases where arm B has strictly higher Dice.
    pub improved: usize,
    pub improved_fraction: f64,
}

fn image_hash(img: &[f32]) -> String {
    let mut h = Sha256::new();
    for v in img {
        h.update(v.to_le_bytes());
    }
    hex(&h.finalize())
}

fn segment(model: &SegModel, image: &[f32], film: &FiLMParams) -> Result<(Vec<u8>, String)> {
    let x: Vec<f64> = image.iter().map(|&v| f64::from(v)).collect();
    let logits = model.predict_logits(&model.image_batch(&[&x])?, Some(film))?;
    Ok((argmax_masks(&logits).remove(0), image_hash(image)))
}

pub fn intervention_study(
    model: &SegModel,
    reasoner: &dyn FilmPredictor,
    samples: &[Sample],
    cfg: &StudyConfig,
) -> Result<InterventionStudy> {
    let k = model.config.num_classes;
    let identity = model.identity_film();
    let mut cases = Vec::with_capacity(cfg.n_cases);
    for case in 0..cfg.n_cases {
        let mut rng = seed::rng(cfg.seed, &[seed::tag("study"), case as u64]);
        let kind = cfg.kinds[case % cfg.kinds.len()];
        let sample_index = rng.random_range(0..samples.len());
        let severity = rng.random_range(cfg.severity.0..=cfg.severity.1);
        let (s, _) = corrupt_for_intervention(&samples[sample_index], kind, severity)?;
        let cmd = canonical_command(kind, severity, k);
        let film = reasoner.predict(&cmd)?;
        let (pred_a, hash_a) = segment(model, &s.image, &identity)?;
        let (pred_b, hash_b) = segment(model, &s.image, &film)?;
        assert_eq!(hash_a, hash_b, "both arms must see the same input");
        let rec = |pred: &[u8]| EvalRecord::new(case, &s.domain, s.content_seed, pred, &s.mask, s.size, k);
        let (a, b) = (rec(&pred_a), rec(&pred_b));
        cases.push(StudyCase {
            case,
            sample_index,
            domain: s.domain.clone(),
            kind,
            severity,
            command: cmd.canonical(),
            input_hash: hash_a,
            dice_a: a.mean_dice,
            dice_b: b.mean_dice,
            hd95_a: a.mean_hd95,
            hd95_b: b.mean_hd95,
        });
    }
    Ok(summarize_cases(cfg.clone(), cases))
}

pub fn summarize_cases(config: StudyConfig, cases: Vec<StudyCase>) -> InterventionStudy {
    let da: Vec<f64> = cases.iter().map(|c| c.dice_a).collect();
    let db: Vec<f64> = cases.iter().map(|c| c.dice_b).collect();
    let (ha, hb): (Vec<f64>, Vec<f64>) = cases
        .iter()
        .filter_map(|c| Some((c.hd95_a?, c.hd95_b?)))
        .unzip();
    let improved = cases.iter().filter(|c| c.dice_b > c.dice_a).count();
    InterventionStudy {
        dice_a: Stat::of(&da),
        dice_b: Stat::of(&db),
        hd95_a: (!ha.is_empty()).then(|| Stat::of(&ha)),
        hd95_b: (!hb.is_empty()).then(|| Stat::of(&hb)),
        hd95_cases: ha.len(),
        improved,
        improved_fraction: if cases.is_empty() {
            0.0
        } else {
            improved as f64 / cases.len() as f64
        },
        config,
        cases,
    }
}
