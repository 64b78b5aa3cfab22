//! Style transforms, applied in a fixed order:
//! modality LUT, gamma, bias field, artifacts, noise, clip.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Artifact, Modality, NoiseKind, Result, StyleDescriptor};
use crate::seed;

fn lut(modality: Modality, v: f64) -> f64 {
    let v = v.clamp(0.0, 1.0);
    match modality {
        Modality::CtLike => v,
        Modality::T1Like => v * v * (3.0 - 2.0 * v),
        Modality::T2Like => v.sqrt(),
        Modality::Inverted => 1.0 - v,
    }
}

/// Intermediate images of [`apply_style`], for inspection and tests.
#[derive(Debug, Clone)]
pub struct StyleStages {
    /// After LUT, gamma, bias and artifacts; not clipped.
    pub pre_noise: Vec<f64>,
    /// After noise, not clipped.
    pub noisy: Vec<f64>,
    pub output: Vec<f32>,
}

/// Applies `d` to a clean `size x size` image. Reads intensities only.
pub fn apply_style(clean: &[f32], size: usize, d: &StyleDescriptor, seed: u64) -> Result<Vec<f32>> {
    Ok(apply_style_stages(clean, size, d, seed)?.output)
}

pub fn apply_style_stages(
    clean: &[f32],
    size: usize,
    d: &StyleDescriptor,
    style_seed: u64,
) -> Result<StyleStages> {
    d.validate()?;
    let mut img: Vec<f64> = clean
        .iter()
        .map(|&v| lut(d.modality, f64::from(v)).powf(d.contrast))
        .collect();

    if d.bias_strength > 0.0 {
        let mut rng = seed::rng(style_seed, &[seed::tag("bias")]);
        let theta = rng.random_range(0.0..PI);
        let phase = rng.random_range(0.0..2.0 * PI);
        let freq = rng.random_range(0.5..1.0) * PI / size as f64;
        let (s, c) = theta.sin_cos();
        for y in 0..size {
            for x in 0..size {
                let t = (x as f64 * c + y as f64 * s) * freq + phase;
                img[y * size + x] *= 1.0 + d.bias_strength * t.sin();
            }
        }
    }

    for artifact in &d.artifacts {
        let mut rng = seed::rng(style_seed, &[seed::tag(artifact.as_str())]);
        match artifact {
            Artifact::MotionStreak => {
                // Horizontal ghost of the image plus faint periodic banding.
                let shift = rng.random_range(size / 10..size / 5).max(1);
                let period = rng.random_range(4.0..9.0);
                let ghost = img.clone();
                for y in 0..size {
                    let band = 0.04 * (2.0 * PI * y as f64 / period).sin();
                    for x in 0..size {
                        let src = ghost[y * size + (x + size - shift) % size];
                        let v = &mut img[y * size + x];
                        *v = 0.75 * *v + 0.25 * src + band;
                    }
                }
            }
            Artifact::SignalDropout => {
                let h = rng.random_range(size / 8..size / 4).max(1);
                let y0 = rng.random_range(0..size - h);
                for v in &mut img[y0 * size..(y0 + h) * size] {
                    *v *= 0.35;
                }
            }
        }
    }

    let pre_noise = img.clone();
    if d.noise_kind != NoiseKind::None && d.noise_level > 0.0 {
        let mut rng = seed::rng(style_seed, &[seed::tag("noise")]);
        for v in &mut img {
            let z: f64 = StandardNormal.sample(&mut rng);
            match d.noise_kind {
                NoiseKind::Gaussian => *v += d.noise_level * z,
                NoiseKind::Speckle => *v += *v * d.noise_level * z,
                NoiseKind::None => {}
            }
        }
    }
    let output = img.iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    Ok(StyleStages {
        pre_noise,
        noisy: img,
        output,
    })
}
