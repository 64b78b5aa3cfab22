//! Synthetic segmentation data with content and style generated by
//! independent random streams.
//!
//! A [`Sample`]'s mask is a function of its `content_seed` alone; the
//! [`StyleDescriptor`] only changes intensities. Domains are distributions
//! over descriptors, so domain shift is pure style shift by construction.

mod content;
mod corrupt;
mod io;
mod style;

pub use content::{canonical_intensities, min_class_pixels, render_content};
pub use corrupt::{corrupt_for_intervention, Corruption, CorruptionKind};
pub use io::{
    decode_split, encode_split, read_dataset, read_split, write_dataset, write_split, DATASET_MAGIC,
};
pub use style::{apply_style, apply_style_stages, StyleStages};

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("descriptor field {field} = {value} outside [{lo}, {hi}]")]
    DescriptorRange {
        field: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("domain {0:?} appears in both source and OOD domain lists")]
    OverlappingDomains(String),
    #[error("domain {domain:?}: {reason}")]
    InvalidDomain { domain: String, reason: String },
    #[error("invalid dataset config: {0}")]
    InvalidConfig(String),
    #[error("unknown corruption kind {0:?}")]
    UnknownCorruption(String),
    #[error("severity {0} outside (0, 1]")]
    Severity(f64),
    #[error("unknown {what} {value:?}")]
    UnknownTag { what: &'static str, value: String },
    #[error("dataset file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SynthError>;

pub const CONTRAST_RANGE: (f64, f64) = (0.3, 2.5);
pub const NOISE_RANGE: (f64, f64) = (0.0, 0.3);
pub const BIAS_RANGE: (f64, f64) = (0.0, 0.6);

macro_rules! tagged_enum {
    ($name:ident, $what:literal { $($variant:ident => $text:literal = $code:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }

            pub fn code(self) -> u8 {
                match self {
                    $($name::$variant => $code),+
                }
            }

            pub fn from_code(code: u8) -> Option<Self> {
                match code {
                    $($code => Some($name::$variant),)+
                    _ => None,
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = SynthError;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(SynthError::UnknownTag { what: $what, value: s.to_string() }),
                }
            }
        }
    };
}

tagged_enum!(Modality, "modality" {
    CtLike => "ct_like" = 0,
    T1Like => "t1_like" = 1,
    T2Like => "t2_like" = 2,
    Inverted => "inverted" = 3,
});

tagged_enum!(NoiseKind, "noise kind" {
    None => "none" = 0,
    Gaussian => "gaussian" = 1,
    Speckle => "speckle" = 2,
});

tagged_enum!(Artifact, "artifact" {
    MotionStreak => "motion_streak" = 0,
    SignalDropout => "signal_dropout" = 1,
});

/// Structured description of an image's acquisition style.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleDescriptor {
    pub modality: Modality,
    /// Gamma exponent applied after the modality LUT.
    pub contrast: f64,
    pub noise_kind: NoiseKind,
    /// Noise standard deviation as a fraction of the [0, 1] range.
    pub noise_level: f64,
    /// Peak amplitude of the multiplicative bias field.
    pub bias_strength: f64,
    /// Empty means no artifacts.
    pub artifacts: BTreeSet<Artifact>,
}

impl StyleDescriptor {
    /// Leaves a clean image untouched.
    pub fn identity() -> Self {
        StyleDescriptor {
            modality: Modality::CtLike,
            contrast: 1.0,
            noise_kind: NoiseKind::None,
            noise_level: 0.0,
            bias_strength: 0.0,
            artifacts: BTreeSet::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |field, value: f64, (lo, hi): (f64, f64)| {
            if value.is_finite() && (lo..=hi).contains(&value) {
                Ok(())
            } else {
                Err(SynthError::DescriptorRange {
                    field,
                    value,
                    lo,
                    hi,
                })
            }
        };
        check("contrast", self.contrast, CONTRAST_RANGE)?;
        check("noise_level", self.noise_level, NOISE_RANGE)?;
        check("bias_strength", self.bias_strength, BIAS_RANGE)
    }
}

/// Sampling distribution over descriptors for one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorDistribution {
    /// Modalities with relative weights.
    pub modalities: Vec<(Modality, f64)>,
    pub contrast: (f64, f64),
    pub noise_kinds: Vec<(NoiseKind, f64)>,
    pub noise_level: (f64, f64),
    pub bias_strength: (f64, f64),
    /// Independent inclusion probability per artifact.
    pub artifact_prob: Vec<(Artifact, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub distribution: DescriptorDistribution,
    pub seed: u64,
}

fn pick<T: Copy>(rng: &mut impl Rng, options: &[(T, f64)]) -> T {
    let total: f64 = options.iter().map(|(_, w)| w).sum();
    let mut draw = rng.random_range(0.0..total);
    for &(item, w) in options {
        if draw < w {
            return item;
        }
        draw -= w;
    }
    options.last().expect("non-empty options").0
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| SynthError::InvalidDomain {
            domain: self.name.clone(),
            reason,
        };
        let d = &self.distribution;
        let within = |(lo, hi): (f64, f64), (glo, ghi): (f64, f64)| lo <= hi && lo >= glo && hi <= ghi;
        if !within(d.contrast, CONTRAST_RANGE) {
            return Err(bad(format!("contrast range {:?}", d.contrast)));
        }
        if !within(d.noise_level, NOISE_RANGE) {
            return Err(bad(format!("noise range {:?}", d.noise_level)));
        }
        if !within(d.bias_strength, BIAS_RANGE) {
            return Err(bad(format!("bias range {:?}", d.bias_strength)));
        }
        let positive = |ws: &mut dyn Iterator<Item = f64>| {
            let ws: Vec<f64> = ws.collect();
            !ws.is_empty() && ws.iter().all(|w| *w >= 0.0) && ws.iter().sum::<f64>() > 0.0
        };
        if !positive(&mut d.modalities.iter().map(|m| m.1)) {
            return Err(bad("modality weights".into()));
        }
        if !positive(&mut d.noise_kinds.iter().map(|m| m.1)) {
            return Err(bad("noise kind weights".into()));
        }
        if d.artifact_prob.iter().any(|(_, p)| !(0.0..=1.0).contains(p)) {
            return Err(bad("artifact probabilities".into()));
        }
        Ok(())
    }

    pub fn sample_descriptor(&self, rng: &mut impl Rng) -> StyleDescriptor {
        let d = &self.distribution;
        let modality = pick(rng, &d.modalities);
        let contrast = uniform(rng, d.contrast);
        let noise_kind = pick(rng, &d.noise_kinds);
        let level = uniform(rng, d.noise_level);
        let bias_strength = uniform(rng, d.bias_strength);
        let mut artifacts = BTreeSet::new();
        for &(a, p) in &d.artifact_prob {
            if rng.random::<f64>() < p {
                artifacts.insert(a);
            }
        }
        StyleDescriptor {
            modality,
            contrast,
            noise_kind,
            noise_level: if noise_kind == NoiseKind::None { 0.0 } else { level },
            bias_strength,
            artifacts,
        }
    }

    /// Whether `d` lies inside this domain's sampling support.
    pub fn contains(&self, d: &StyleDescriptor) -> bool {
        let dist = &self.distribution;
        let inside = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
        dist.modalities.iter().any(|(m, w)| *m == d.modality && *w > 0.0)
            && inside(d.contrast, dist.contrast)
            && dist.noise_kinds.iter().any(|(k, w)| *k == d.noise_kind && *w > 0.0)
            && (d.noise_kind == NoiseKind::None || inside(d.noise_level, dist.noise_level))
            && inside(d.bias_strength, dist.bias_strength)
    }

    /// Mild CT-like source domain whose style varies across descriptor bins.
    pub fn default_source() -> Self {
        DomainSpec {
            name: "ct_source".into(),
            distribution: DescriptorDistribution {
                modalities: vec![(Modality::CtLike, 1.0)],
                contrast: (0.6, 1.6),
                noise_kinds: vec![(NoiseKind::None, 1.0), (NoiseKind::Gaussian, 2.0)],
                noise_level: (0.01, 0.08),
                bias_strength: (0.0, 0.3),
                artifact_prob: vec![(Artifact::MotionStreak, 0.15)],
            },
            seed: 11,
        }
    }

    /// Held-out T2-like domain with heavy noise.
    pub fn default_ood_t2_noisy() -> Self {
        DomainSpec {
            name: "t2_noisy".into(),
            distribution: DescriptorDistribution {
                modalities: vec![(Modality::T2Like, 1.0)],
                contrast: (0.8, 1.3),
                noise_kinds: vec![(NoiseKind::Gaussian, 1.0), (NoiseKind::Speckle, 1.0)],
                noise_level: (0.12, 0.22),
                bias_strength: (0.0, 0.2),
                artifact_prob: vec![(Artifact::SignalDropout, 0.2)],
            },
            seed: 23,
        }
    }

    /// Held-out inverted-contrast domain with a strong bias field.
    pub fn default_ood_inverted_bias() -> Self {
        DomainSpec {
            name: "inverted_bias".into(),
            distribution: DescriptorDistribution {
                modalities: vec![(Modality::Inverted, 1.0)],
                contrast: (0.7, 1.4),
                noise_kinds: vec![(NoiseKind::None, 1.0), (NoiseKind::Gaussian, 1.0)],
                noise_level: (0.01, 0.05),
                bias_strength: (0.35, 0.6),
                artifact_prob: vec![],
            },
            seed: 37,
        }
    }
}

/// One image with its mask and the style that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub size: usize,
    /// Row-major `size x size` intensities in [0, 1].
    pub image: Vec<f32>,
    /// Row-major `size x size` class labels.
    pub mask: Vec<u8>,
    pub descriptor: StyleDescriptor,
    pub domain: String,
    pub content_seed: u64,
}

impl Sample {
    pub fn image_f64(&self) -> Vec<f64> {
        self.image.iter().map(|&v| f64::from(v)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub image_size: usize,
    pub num_classes: usize,
    /// Training samples drawn from each source domain.
    pub samples_per_domain: usize,
    /// Test samples per source (ID) and per OOD domain.
    pub test_samples_per_domain: usize,
    pub source_domains: Vec<DomainSpec>,
    pub ood_domains: Vec<DomainSpec>,
    pub master_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            image_size: 64,
            num_classes: 4,
            samples_per_domain: 2000,
            test_samples_per_domain: 200,
            source_domains: vec![DomainSpec::default_source()],
            ood_domains: vec![
                DomainSpec::default_ood_t2_noisy(),
                DomainSpec::default_ood_inverted_bias(),
            ],
            master_seed: 2024,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 || self.image_size % 8 != 0 {
            return Err(SynthError::InvalidConfig(format!(
                "image_size {} must be a multiple of 8 and at least 16",
                self.image_size
            )));
        }
        if !(2..=16).contains(&self.num_classes) {
            return Err(SynthError::InvalidConfig(format!(
                "num_classes {} outside 2..=16",
                self.num_classes
            )));
        }
        if self.source_domains.is_empty() {
            return Err(SynthError::InvalidConfig("no source domains".into()));
        }
        let sources: HashSet<&str> = self.source_domains.iter().map(|d| d.name.as_str()).collect();
        for d in &self.ood_domains {
            if sources.contains(d.name.as_str()) {
                return Err(SynthError::OverlappingDomains(d.name.clone()));
            }
        }
        let mut seen = HashSet::new();
        for d in self.source_domains.iter().chain(&self.ood_domains) {
            if !seen.insert(d.name.as_str()) {
                return Err(SynthError::InvalidConfig(format!("duplicate domain {:?}", d.name)));
            }
            d.validate()?;
        }
        Ok(())
    }

    pub fn domain(&self, name: &str) -> Option<&DomainSpec> {
        self.source_domains
            .iter()
            .chain(&self.ood_domains)
            .find(|d| d.name == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub id_test: Vec<Sample>,
    pub ood_tests: BTreeMap<String, Vec<Sample>>,
}

impl Dataset {
    pub fn all_samples(&self) -> impl Iterator<Item = &Sample> {
        self.train
            .iter()
            .chain(&self.id_test)
            .chain(self.ood_tests.values().flatten())
    }
}

const STREAM_CONTENT: u64 = 0xC0;
const STREAM_STYLE: u64 = 0x57;

/// Draws one styled sample from `domain` for the given content seed.
pub fn make_sample(cfg: &DatasetConfig, domain: &DomainSpec, content_seed: u64, style_key: u64) -> Sample {
    let (clean, mask) = render_content(content_seed, cfg);
    let mut rng = seed::rng(domain.seed, &[cfg.master_seed, STREAM_STYLE, style_key]);
    let descriptor = domain.sample_descriptor(&mut rng);
    let style_seed = seed::derive(domain.seed, &[cfg.master_seed, style_key, 1]);
    let image = apply_style(&clean, cfg.image_size, &descriptor, style_seed)
        .expect("sampled descriptors lie inside the global ranges");
    Sample {
        size: cfg.image_size,
        image,
        mask,
        descriptor,
        domain: domain.name.clone(),
        content_seed,
    }
}

/// Builds every split deterministically from `cfg.master_seed`.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut used = HashSet::new();
    let mut counter = 0u64;
    let mut next_content = || loop {
        let s = seed::derive(cfg.master_seed, &[STREAM_CONTENT, counter]);
        counter += 1;
        if used.insert(s) {
            return s;
        }
    };
    let mut split = |domain: &DomainSpec, split_tag: &str, n: usize| -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let key = seed::derive(seed::tag(split_tag), &[seed::tag(&domain.name), i as u64]);
                make_sample(cfg, domain, next_content(), key)
            })
            .collect::<Vec<_>>()
    };
    let mut train = Vec::new();
    let mut id_test = Vec::new();
    for d in &cfg.source_domains {
        train.extend(split(d, "train", cfg.samples_per_domain));
        id_test.extend(split(d, "id_test", cfg.test_samples_per_domain));
    }
    let ood_tests = cfg
        .ood_domains
        .iter()
        .map(|d| (d.name.clone(), split(d, "ood_test", cfg.test_samples_per_domain)))
        .collect();
    Ok(Dataset {
        train,
        id_test,
        ood_tests,
    })
}
