//! Procedural four-class leaf images for self-contained experiments.
//!
//! Every image is a green leaf texture. The classes differ by what is drawn
//! on top of it:
//!
//! * `healthy` — a soft pale blob;
//! * `multiple_diseases` — a mixture of spots and stripes;
//! * `rust` — orange spots;
//! * `scab` — dark stripes.
//!
//! `signal` scales lesion contrast and `noise` is the per-pixel Gaussian noise
//! std, so task difficulty can be dialed in.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::{image_rng, Image};
use crate::dataset::LabeledSet;
use crate::error::{Error, Result};
use crate::metrics::{LabelMatrix, CLASS_NAMES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub count: usize,
    pub size: usize,
    pub noise: f64,
    pub signal: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            count: 1000,
            size: 32,
            noise: 0.08,
            signal: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::EmptyDataset);
        }
        if self.size < 8 {
            return Err(Error::InvalidConfig(format!("synthetic size {} must be >= 8", self.size)));
        }
        if !(self.noise >= 0.0) || !(self.signal >= 0.0) {
            return Err(Error::InvalidConfig("synthetic noise and signal must be >= 0".into()));
        }
        Ok(())
    }
}

const LEAF: [f64; 3] = [0.25, 0.55, 0.2];
const PALE: [f64; 3] = [0.45, 0.7, 0.35];
const RUST: [f64; 3] = [0.85, 0.45, 0.1];
const SCAB: [f64; 3] = [0.2, 0.15, 0.1];

struct Canvas {
    size: usize,
    px: Vec<f64>,
}

impl Canvas {
    fn blend(&mut self, y: usize, x: usize, color: [f64; 3], alpha: f64) {
        let base = (y * self.size + x) * 3;
        for (v, target) in self.px[base..base + 3].iter_mut().zip(color) {
            *v += alpha * (target - *v);
        }
    }

    fn coords(&self) -> impl Iterator<Item = (usize, usize, f64, f64)> {
        let s = self.size;
        (0..s * s).map(move |i| {
            let (y, x) = (i / s, i % s);
            (y, x, (y as f64 + 0.5) / s as f64, (x as f64 + 0.5) / s as f64)
        })
    }

    fn blob<R: Rng>(&mut self, rng: &mut R, strength: f64) {
        let (cy, cx) = (rng.random_range(0.3..0.7), rng.random_range(0.3..0.7));
        let r = rng.random_range(0.18..0.3);
        let pts: Vec<_> = self.coords().collect();
        for (y, x, fy, fx) in pts {
            let d2 = ((fy - cy).powi(2) + (fx - cx).powi(2)) / (r * r);
            self.blend(y, x, PALE, strength * (-d2).exp());
        }
    }

    fn spots<R: Rng>(&mut self, rng: &mut R, count: usize, strength: f64) {
        for _ in 0..count {
            let (cy, cx) = (rng.random_range(0.1..0.9), rng.random_range(0.1..0.9));
            let r = rng.random_range(0.04..0.08);
            let pts: Vec<_> = self.coords().collect();
            for (y, x, fy, fx) in pts {
                let d = ((fy - cy).powi(2) + (fx - cx).powi(2)).sqrt() / r;
                if d < 1.5 {
                    self.blend(y, x, RUST, strength * (1.0 - d / 1.5).clamp(0.0, 1.0).sqrt());
                }
            }
        }
    }

    fn stripes<R: Rng>(&mut self, rng: &mut R, count: usize, strength: f64) {
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let (s, c) = theta.sin_cos();
        for _ in 0..count {
            let offset = rng.random_range(-0.35..0.35);
            let width = rng.random_range(0.025..0.05);
            let pts: Vec<_> = self.coords().collect();
            for (y, x, fy, fx) in pts {
                let d = ((fx - 0.5) * s - (fy - 0.5) * c - offset).abs() / width;
                if d < 1.5 {
                    self.blend(y, x, SCAB, strength * (1.0 - d / 1.5));
                }
            }
        }
    }
}

/// One image of class `class` (index into [`CLASS_NAMES`]).
pub fn render<R: Rng>(class: usize, cfg: &SyntheticConfig, rng: &mut R) -> Result<Image> {
    if class >= CLASS_NAMES.len() {
        return Err(Error::InvalidConfig(format!("class {class} out of range")));
    }
    let s = cfg.size;
    let shade: f64 = rng.random_range(0.8..1.2);
    let tint: [f64; 3] = [
        rng.random_range(-0.05..0.05),
        rng.random_range(-0.05..0.05),
        rng.random_range(-0.05..0.05),
    ];
    let mut canvas = Canvas {
        size: s,
        px: (0..s * s).flat_map(|_| (0..3).map(|c| LEAF[c] * shade + tint[c])).collect(),
    };
    let strength = |rng: &mut R| (cfg.signal * rng.random_range(0.6..1.0)).min(1.0);
    match class {
        0 => {
            let a = strength(rng);
            canvas.blob(rng, a);
        }
        1 => {
            let (a, b) = (strength(rng), strength(rng));
            let spots = rng.random_range(2..4);
            canvas.spots(rng, spots, a);
            let stripes = rng.random_range(1..3);
            canvas.stripes(rng, stripes, b);
        }
        2 => {
            let a = strength(rng);
            let spots = rng.random_range(3..7);
            canvas.spots(rng, spots, a);
        }
        _ => {
            let a = strength(rng);
            let stripes = rng.random_range(2..4);
            canvas.stripes(rng, stripes, a);
        }
    }
    if cfg.noise > 0.0 {
        let normal = Normal::new(0.0, cfg.noise).expect("validated noise std");
        for v in &mut canvas.px {
            *v += normal.sample(rng);
        }
    }
    for v in &mut canvas.px {
        *v = v.clamp(0.0, 1.0);
    }
    Image::new(s, s, 3, canvas.px)
}

/// Balanced classes in seeded random order; image `i` is drawn from its own
/// rng stream, so any prefix of a larger set is reproducible on its own.
pub fn generate(cfg: &SyntheticConfig) -> Result<LabeledSet> {
    cfg.validate()?;
    let k = CLASS_NAMES.len();
    let mut classes: Vec<usize> = (0..cfg.count).map(|i| i % k).collect();
    classes.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut ids = Vec::with_capacity(cfg.count);
    let mut images = Vec::with_capacity(cfg.count);
    for (i, &c) in classes.iter().enumerate() {
        let mut rng = image_rng(cfg.seed ^ 0x5eed_1eaf, i as u64);
        images.push(Arc::new(render(c, cfg, &mut rng)?));
        ids.push(format!("synth_{i:05}"));
    }
    LabeledSet::new(ids, images, LabelMatrix::one_hot(&classes, k)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let cfg = SyntheticConfig {
            count: 40,
            size: 16,
            ..Default::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a, b);
        let mut counts = [0; 4];
        for i in 0..a.len() {
            counts[a.labels().argmax(i)] += 1;
        }
        assert_eq!(counts, [10; 4]);
        assert!(a.images().iter().all(|im| im.pixels().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn classes_differ_in_color_statistics() {
        let cfg = SyntheticConfig {
            noise: 0.0,
            size: 32,
            ..Default::default()
        };
        let mut rng = image_rng(1, 0);
        let red_mean = |img: &Image| img.pixels().iter().step_by(3).sum::<f64>() / (32.0 * 32.0);
        let healthy = render(0, &cfg, &mut rng).unwrap();
        let rust = render(2, &cfg, &mut rng).unwrap();
        assert!(red_mean(&rust) > red_mean(&healthy));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(generate(&SyntheticConfig { count: 0, ..Default::default() }).is_err());
        assert!(generate(&SyntheticConfig { size: 4, ..Default::default() }).is_err());
    }
}
