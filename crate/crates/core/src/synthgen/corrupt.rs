use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Result, Sample, SynthError};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    BoundaryBlur,
    HeavyNoise,
    BrightStreak,
    DropoutPatch,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 4] = [
        CorruptionKind::BoundaryBlur,
        CorruptionKind::HeavyNoise,
        CorruptionKind::BrightStreak,
        CorruptionKind::DropoutPatch,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CorruptionKind::BoundaryBlur => "boundary_blur",
            CorruptionKind::HeavyNoise => "heavy_noise",
            CorruptionKind::BrightStreak => "bright_streak",
            CorruptionKind::DropoutPatch => "dropout_patch",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CorruptionKind {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| SynthError::UnknownCorruption(s.to_string()))
    }
}

/// The known cause attached to a corrupted sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Corruption {
    pub kind: CorruptionKind,
    pub severity: f64,
}

fn gaussian_blur(img: &[f64], size: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let weights: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let pass = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; src.len()];
        for y in 0..size {
            for x in 0..size {
                let mut acc = 0.0;
                for (i, w) in weights.iter().enumerate() {
                    let d = i as isize - radius;
                    let (sx, sy) = if horizontal {
                        ((x as isize + d).clamp(0, size as isize - 1) as usize, y)
                    } else {
                        (x, (y as isize + d).clamp(0, size as isize - 1) as usize)
                    };
                    acc += w * src[sy * size + sx];
                }
                out[y * size + x] = acc / total;
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

/// Degrades the image of `s` with one known cause; the mask is copied as is.
pub fn corrupt_for_intervention(s: &Sample, kind: CorruptionKind, severity: f64) -> Result<(Sample, Corruption)> {
    if !(severity > 0.0 && severity <= 1.0) {
        return Err(SynthError::Severity(severity));
    }
    let size = s.size;
    let x = s.image_f64();
    let mut rng = seed::rng(s.content_seed, &[seed::tag(kind.as_str())]);
    let out: Vec<f64> = match kind {
        CorruptionKind::BoundaryBlur => {
            let blurred = gaussian_blur(&x, size, 0.05 * size as f64);
            x.iter()
                .zip(&blurred)
                .map(|(a, b)| (1.0 - severity) * a + severity * b)
                .collect()
        }
        CorruptionKind::HeavyNoise => x
            .iter()
            .map(|v| {
                let z: f64 = StandardNormal.sample(&mut rng);
                v + 0.4 * severity * z
            })
            .collect(),
        CorruptionKind::BrightStreak => {
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let offset = rng.random_range(-0.25..0.25) * size as f64;
            let half_width = 0.08 * size as f64;
            let (sn, cs) = angle.sin_cos();
            let c = size as f64 / 2.0;
            let mut img = x.clone();
            for y in 0..size {
                for xx in 0..size {
                    let dist = ((xx as f64 - c) * sn - (y as f64 - c) * cs - offset).abs();
                    let profile = (1.0 - dist / half_width).max(0.0);
                    img[y * size + xx] += 0.7 * severity * profile;
                }
            }
            img
        }
        CorruptionKind::DropoutPatch => {
            let area = (0.055 + 0.09 * severity) * (size * size) as f64;
            let aspect: f64 = rng.random_range(0.6..1.6);
            let w = ((area * aspect).sqrt().round() as usize).clamp(1, size);
            let h = ((area / w as f64).round() as usize).clamp(1, size);
            let cx = rng.random_range(0.3..0.7) * size as f64;
            let cy = rng.random_range(0.3..0.7) * size as f64;
            let x0 = ((cx - w as f64 / 2.0).round().max(0.0) as usize).min(size - w);
            let y0 = ((cy - h as f64 / 2.0).round().max(0.0) as usize).min(size - h);
            let mut img = x.clone();
            for y in y0..y0 + h {
                for v in &mut img[y * size + x0..y * size + x0 + w] {
                    *v *= 1.0 - severity;
                }
            }
            img
        }
    };
    let mut corrupted = s.clone();
    corrupted.image = out.iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    Ok((corrupted, Corruption { kind, severity }))
}
