use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::DatasetHandle;
use crate::error::{Error, Result};
use crate::rng::derive_rng;

/// Class-template images: each class owns a blocky random template, each
/// example is its template at reduced contrast plus uniform pixel noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    pub classes: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Template blocks per side.
    pub blocks: usize,
    /// Template contrast around mid-grey, in [0, 1].
    pub amplitude: f64,
    /// Half-width of the uniform per-pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 500,
            classes: 2,
            image_size: 16,
            channels: 3,
            blocks: 4,
            amplitude: 0.5,
            noise: 0.2,
            seed: 0,
        }
    }
}

pub fn synth_dataset(n: usize, classes: usize, image_size: usize, seed: u64) -> Result<DatasetHandle> {
    synth_dataset_with(&SynthConfig {
        n,
        classes,
        image_size,
        seed,
        ..SynthConfig::default()
    })
}

pub fn synth_dataset_with(cfg: &SynthConfig) -> Result<DatasetHandle> {
    if cfg.classes < 2 || cfg.n < cfg.classes {
        return Err(Error::config(format!(
            "synthetic set needs at least 2 classes and n >= classes (n={}, classes={})",
            cfg.n, cfg.classes
        )));
    }
    if cfg.image_size == 0 || cfg.channels == 0 || cfg.blocks == 0 || cfg.blocks > cfg.image_size {
        return Err(Error::config("synthetic image_size, channels and blocks must be positive, blocks <= image_size"));
    }
    let (c, s, b) = (cfg.channels, cfg.image_size, cfg.blocks);
    let templates: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|k| {
            let mut rng = derive_rng(cfg.seed, "synth-template", k as u64);
            let coarse: Vec<f64> = (0..c * b * b).map(|_| rng.random::<f64>()).collect();
            let mut t = Vec::with_capacity(c * s * s);
            for ch in 0..c {
                for y in 0..s {
                    for x in 0..s {
                        t.push(coarse[(ch * b + y * b / s) * b + x * b / s]);
                    }
                }
            }
            t
        })
        .collect();
    let mut pixels = Vec::with_capacity(cfg.n * c * s * s);
    let mut labels = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let k = i % cfg.classes;
        let mut rng = derive_rng(cfg.seed, "synth-image", i as u64);
        for &t in &templates[k] {
            let v = 0.5 + cfg.amplitude * (t - 0.5) + cfg.noise * rng.random_range(-1.0..=1.0);
            pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        labels.push(k);
    }
    DatasetHandle::new(format!("synth-{}x{}-seed{}", cfg.classes, s, cfg.seed), [c, s, s], cfg.classes, pixels, labels)
}
