//! Random square patches with a cap on the masked (land) fraction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::SceneBundle;
use crate::error::{invalid, shape_err, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub patch_size: usize,
    pub patches_per_scene: usize,
    /// Patches with a strictly larger masked fraction are redrawn.
    pub max_masked_fraction: f64,
    /// Redraws allowed per requested patch.
    pub max_redraws: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            patch_size: 192,
            patches_per_scene: 20,
            max_masked_fraction: 0.30,
            max_redraws: 200,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_masked_fraction > 0.0 && self.max_masked_fraction < 1.0) {
            return Err(invalid!("max_masked_fraction must lie in (0, 1), got {}", self.max_masked_fraction));
        }
        if self.patch_size == 0 {
            return Err(invalid!("patch_size must be positive"));
        }
        Ok(())
    }
}

/// Top-left corner and side of an accepted patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchView {
    pub y: usize,
    pub x: usize,
    pub size: usize,
    pub masked: usize,
}

impl PatchView {
    pub fn masked_fraction(&self) -> f64 {
        self.masked as f64 / (self.size * self.size) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleReport {
    pub patches: Vec<PatchView>,
    pub rejections: usize,
    /// Requested minus delivered patches.
    pub shortfall: usize,
}

/// Summed-area table of a u8 mask, `(H+1) × (W+1)`.
pub struct MaskIntegral {
    width: usize,
    sums: Vec<u32>,
}

impl MaskIntegral {
    pub fn new(mask: &[u8], height: usize, width: usize) -> Self {
        let w1 = width + 1;
        let mut sums = vec![0u32; (height + 1) * w1];
        for y in 0..height {
            let mut row = 0u32;
            for x in 0..width {
                row += (mask[y * width + x] != 0) as u32;
                sums[(y + 1) * w1 + x + 1] = sums[y * w1 + x + 1] + row;
            }
        }
        MaskIntegral { width, sums }
    }

    pub fn count(&self, y: usize, x: usize, h: usize, w: usize) -> usize {
        let w1 = self.width + 1;
        let at = |yy: usize, xx: usize| self.sums[yy * w1 + xx] as i64;
        (at(y + h, x + w) - at(y, x + w) - at(y + h, x) + at(y, x)) as usize
    }
}

pub fn sample_patches(scene: &SceneBundle, cfg: &SamplerConfig) -> Result<SampleReport> {
    cfg.validate()?;
    let s = cfg.patch_size;
    if s > scene.height || s > scene.width {
        return Err(shape_err!(
            "patch size {s} exceeds scene `{}` of {}x{}",
            scene.id,
            scene.height,
            scene.width
        ));
    }
    let integral = MaskIntegral::new(&scene.mask, scene.height, scene.width);
    let area = (s * s) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut patches = Vec::with_capacity(cfg.patches_per_scene);
    let mut rejections = 0;
    for _ in 0..cfg.patches_per_scene {
        for _ in 0..=cfg.max_redraws {
            let y = rng.gen_range(0..=scene.height - s);
            let x = rng.gen_range(0..=scene.width - s);
            let masked = integral.count(y, x, s, s);
            if masked as f64 / area > cfg.max_masked_fraction {
                rejections += 1;
                continue;
            }
            patches.push(PatchView { y, x, size: s, masked });
            break;
        }
    }
    let shortfall = cfg.patches_per_scene - patches.len();
    if shortfall > 0 {
        log::warn!("scene {}: {shortfall} of {} patches not found within the redraw cap", scene.id, cfg.patches_per_scene);
    }
    Ok(SampleReport {
        patches,
        rejections,
        shortfall,
    })
}
