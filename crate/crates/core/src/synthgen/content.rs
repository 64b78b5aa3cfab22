use std::f64::consts::PI;

use rand::Rng;

use super::DatasetConfig;
use crate::seed;

/// Clean-image intensity for each class; background first.
pub fn canonical_intensities(num_classes: usize) -> Vec<f64> {
    let mut out = vec![0.2];
    let organs = num_classes.saturating_sub(1);
    for k in 0..organs {
        let t = if organs > 1 { k as f64 / (organs - 1) as f64 } else { 0.5 };
        out.push(0.45 + 0.4 * t);
    }
    out
}

/// Smallest pixel count every foreground class must reach.
pub fn min_class_pixels(image_size: usize) -> usize {
    20.min(image_size * image_size / 16)
}

struct Blob {
    class: u8,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    angle: f64,
    /// (frequency, amplitude, phase) of the radial warps.
    warps: [(f64, f64, f64); 2],
}

impl Blob {
    fn random(rng: &mut impl Rng, class: u8, size: f64) -> Self {
        let margin = 0.18 * size;
        Blob {
            class,
            cx: rng.random_range(margin..size - margin),
            cy: rng.random_range(margin..size - margin),
            rx: rng.random_range(0.09..0.2) * size,
            ry: rng.random_range(0.09..0.2) * size,
            angle: rng.random_range(0.0..PI),
            warps: [
                (2.0, rng.random_range(0.0..0.15), rng.random_range(0.0..2.0 * PI)),
                (3.0, rng.random_range(0.0..0.1), rng.random_range(0.0..2.0 * PI)),
            ],
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = (dx * c + dy * s) / self.rx;
        let v = (-dx * s + dy * c) / self.ry;
        let r = (u * u + v * v).sqrt();
        let phi = v.atan2(u);
        let limit = 1.0
            + self
                .warps
                .iter()
                .map(|(f, a, p)| a * (f * phi + p).sin())
                .sum::<f64>();
        r < limit
    }
}

/// Renders a clean image and its mask from `content_seed` alone.
///
/// One blob per foreground class plus, half of the time, an extra blob of a
/// random class; later blobs paint over earlier ones. Layouts where some
/// class ends up below [`min_class_pixels`] are redrawn.
pub fn render_content(content_seed: u64, cfg: &DatasetConfig) -> (Vec<f32>, Vec<u8>) {
    let size = cfg.image_size;
    let k = cfg.num_classes;
    let base = canonical_intensities(k);
    let need = min_class_pixels(size);
    for attempt in 0u64.. {
        let mut rng = seed::rng(content_seed, &[attempt]);
        let mut classes: Vec<u8> = (1..k as u8).collect();
        if rng.random::<f64>() < 0.5 {
            classes.push(rng.random_range(1..k as u8));
        }
        // Shuffle painting order so no class is always on top.
        for i in (1..classes.len()).rev() {
            let j = rng.random_range(0..=i);
            classes.swap(i, j);
        }
        let blobs: Vec<Blob> = classes
            .iter()
            .map(|&c| Blob::random(&mut rng, c, size as f64))
            .collect();
        let gains: Vec<f64> = (0..k).map(|_| rng.random_range(0.9..1.1)).collect();

        let mut mask = vec![0u8; size * size];
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                for b in &blobs {
                    if b.contains(px, py) {
                        mask[y * size + x] = b.class;
                    }
                }
            }
        }
        let mut counts = vec![0usize; k];
        mask.iter().for_each(|&m| counts[m as usize] += 1);
        if counts[1..].iter().any(|&c| c < need) {
            continue;
        }
        let image = mask
            .iter()
            .map(|&m| (base[m as usize] * gains[m as usize]).clamp(0.0, 1.0) as f32)
            .collect();
        return (image, mask);
    }
    unreachable!("attempt counter is unbounded")
}
