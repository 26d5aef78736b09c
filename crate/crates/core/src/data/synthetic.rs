//! Synthetic scenes with fine (SAR-like) and coarse (radiometer-like) channels.
//!
//! Regions come from thresholded smooth noise; each region draws polygon
//! attributes and labels follow from [`derive_labels`]. Fine channels carry
//! per-class backscatter with multiplicative speckle. Coarse channels are
//! averaged onto a 1/16 grid and bilinearly upsampled, so they only resolve
//! structure at the scale of the encoder output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::labels::{derive_labels, IcePolygonAttrs, PartialEntry};
use super::scene::{all_channels, SceneBundle, AMSR_FREQS, HH, HV, INCIDENCE};
use crate::error::{invalid, Result};
use crate::tensor::{bilinear_upsample, no_grad, Tensor, IGNORE_INDEX};

/// Downsampling factor of the coarse channels.
pub const COARSE_FACTOR: usize = 16;

/// SOD classes 4 and 5 share fine-channel backscatter when ambiguity is on.
pub const AMBIGUOUS_SOD: [u8; 2] = [4, 5];

/// SOD label assigned to small squares in context-coded scenes.
pub const CONTEXT_SOD: u8 = 3;
/// SOD appearance (and label of large squares) in context-coded scenes.
pub const CONTEXT_SOURCE_SOD: u8 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextConfig {
    /// Squares with a side below this many input pixels are relabelled.
    pub diameter: usize,
    /// Side range (input pixels) of relabelled squares; upper bound < `diameter`.
    pub small: (usize, usize),
    /// Side range of squares that keep their label; lower bound ≥ `diameter`.
    pub large: (usize, usize),
    /// Squares per scene, half small and half large; placement skips squares that find no room.
    pub squares: usize,
}

impl ContextConfig {
    /// Default size populations around a diameter `r`.
    pub fn around(r: usize) -> Self {
        ContextConfig {
            diameter: r,
            small: (r * 11 / 16, r * 15 / 16),
            large: (r * 3 / 2, r * 13 / 8),
            squares: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub scenes: usize,
    pub height: usize,
    pub width: usize,
    /// Correlation length of the region noise, in pixels.
    pub region_scale: usize,
    /// Approximate fraction of land (masked) pixels.
    pub land_fraction: f64,
    /// Equivalent number of looks of the speckle; 0 disables speckle.
    pub speckle_looks: u32,
    pub ambiguity: bool,
    pub context: Option<ContextConfig>,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            scenes: 8,
            height: 384,
            width: 384,
            region_scale: 96,
            land_fraction: 0.05,
            speckle_looks: 8,
            ambiguity: true,
            context: None,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scenes == 0 {
            return Err(invalid!("scene count must be positive"));
        }
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(COARSE_FACTOR) || !self.width.is_multiple_of(COARSE_FACTOR) {
            return Err(invalid!("scene size {}x{} must be a positive multiple of {COARSE_FACTOR}", self.height, self.width));
        }
        if self.region_scale == 0 {
            return Err(invalid!("region_scale must be positive"));
        }
        if !(0.0..0.9).contains(&self.land_fraction) {
            return Err(invalid!("land_fraction must lie in [0, 0.9)"));
        }
        if let Some(c) = &self.context {
            if c.small.0 == 0 || c.small.0 > c.small.1 || c.small.1 >= c.diameter {
                return Err(invalid!("context small sides {:?} must be positive and below {}", c.small, c.diameter));
            }
            if c.large.0 < c.diameter || c.large.0 > c.large.1 {
                return Err(invalid!("context large sides {:?} must start at or above {}", c.large, c.diameter));
            }
            if c.large.1 + 2 > self.height.min(self.width) {
                return Err(invalid!("context squares of side {} do not fit the scene", c.large.1));
            }
        }
        Ok(())
    }
}

/// A generated scene together with the polygon data it was rasterized from.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub bundle: SceneBundle,
    pub regions: Vec<u32>,
    pub attrs: Vec<IcePolygonAttrs>,
    /// Coarse channels on their native 1/16 grid, before upsampling.
    pub coarse: Vec<(String, Vec<f32>)>,
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<SceneBundle>> {
    (0..cfg.scenes).map(|i| generate_scene(cfg, i).map(|s| s.bundle)).collect()
}

/// Backscatter intensity of each SOD code (index 0 unused) on the co-pol channel.
fn hh_of(sod: u8, ambiguity: bool) -> f64 {
    match sod {
        1 => 0.15,
        2 => 0.35,
        3 => 0.55,
        4 => 0.80,
        5 if ambiguity => 0.80,
        5 => 1.20,
        _ => 0.05,
    }
}

fn hv_of(floe: u8) -> f64 {
    0.04 + 0.06 * floe as f64
}

const WATER_HH: f64 = 0.05;
const WATER_HV: f64 = 0.02;
const LAND: f64 = 0.6;

/// Brightness temperature of channel `ch` (0..14) for an SOD code; water is code 0.
fn tb_of(ch: usize, sod: u8) -> f64 {
    let freq = ch / 2;
    let vpol = (ch % 2) as f64;
    let base = 160.0 + 6.0 * freq as f64 + 12.0 * vpol;
    let ice = [0.0, 70.0, 80.0, 88.0, 95.0, 72.0][sod.min(5) as usize];
    // Older ice scatters more at high frequency, which separates codes 4 and 5.
    let scatter = if sod == 5 { -4.0 * freq as f64 } else { 0.0 };
    base + ice + scatter
}

fn smooth_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, scale: usize) -> Vec<f32> {
    let gh = h / scale + 2;
    let gw = w / scale + 2;
    let grid: Vec<f32> = (0..gh * gw).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        let fy = y as f32 / scale as f32;
        let (y0, ty) = (fy as usize, fy.fract());
        for x in 0..w {
            let fx = x as f32 / scale as f32;
            let (x0, tx) = (fx as usize, fx.fract());
            let g = |yy: usize, xx: usize| grid[yy * gw + xx];
            let top = g(y0, x0) + tx * (g(y0, x0 + 1) - g(y0, x0));
            let bot = g(y0 + 1, x0) + tx * (g(y0 + 1, x0 + 1) - g(y0 + 1, x0));
            out[y * w + x] = top + ty * (bot - top);
        }
    }
    out
}

fn quantile_threshold(values: &[f32], upper_fraction: f64) -> f32 {
    let mut v = values.to_vec();
    v.sort_by(f32::total_cmp);
    let idx = ((1.0 - upper_fraction) * v.len() as f64) as usize;
    v.get(idx).copied().unwrap_or(f32::INFINITY)
}

fn sample_attrs(rng: &mut ChaCha8Rng, region: u32, sod_codes: &[u8]) -> IcePolygonAttrs {
    let pick = |rng: &mut ChaCha8Rng| PartialEntry {
        concentration: 0,
        sod: sod_codes[rng.gen_range(0..sod_codes.len())],
        floe: rng.gen_range(1..=6),
    };
    if rng.gen_bool(0.15) {
        return IcePolygonAttrs { region, total: 0, partials: vec![] };
    }
    let total: u8 = if rng.gen_bool(0.75) { rng.gen_range(7..=10) } else { rng.gen_range(1..=6) };
    let mut partials = Vec::new();
    if total >= 7 && rng.gen_bool(0.85) {
        let c = rng.gen_range(7..=total);
        partials.push(PartialEntry { concentration: c, ..pick(rng) });
        let mut rest = total - c;
        while rest > 0 && partials.len() < 3 {
            let c = if partials.len() == 2 { rest } else { rng.gen_range(1..=rest) };
            partials.push(PartialEntry { concentration: c, ..pick(rng) });
            rest -= c;
        }
    } else {
        let mut rest = total;
        while rest > 0 && partials.len() < 3 {
            let cap = rest.min(6);
            let c = if partials.len() == 2 { rest.min(6) } else { rng.gen_range(1..=cap) };
            partials.push(PartialEntry { concentration: c, ..pick(rng) });
            rest -= c;
        }
    }
    IcePolygonAttrs { region, total, partials }
}

/// Concentration-weighted mix of a per-type property with open water.
fn mix(a: &IcePolygonAttrs, water: f64, f: impl Fn(&PartialEntry) -> f64) -> f64 {
    let ice: f64 = a.partials.iter().map(|p| p.concentration as f64 / 10.0 * f(p)).sum();
    let covered: f64 = a.partials.iter().map(|p| p.concentration as f64 / 10.0).sum();
    ice + (1.0 - covered) * water
}

/// Gamma(L, 1/L) speckle as the mean of `L` unit exponentials.
fn speckle(rng: &mut ChaCha8Rng, looks: u32) -> f64 {
    if looks == 0 {
        return 1.0;
    }
    (0..looks).map(|_| -(1.0 - rng.gen::<f64>()).ln()).sum::<f64>() / looks as f64
}

pub fn generate_scene(cfg: &SyntheticConfig, index: usize) -> Result<SyntheticScene> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let n = h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);

    let a = smooth_noise(&mut rng, h, w, cfg.region_scale);
    let b = smooth_noise(&mut rng, h, w, cfg.region_scale);
    let bin = |v: f32| if v < -0.25 { 0 } else if v < 0.25 { 1 } else { 2 };
    let mut regions: Vec<u32> = (0..n).map(|i| bin(a[i]) * 3 + bin(b[i])).collect();

    let mut mask = vec![0u8; n];
    if cfg.land_fraction > 0.0 {
        let land = smooth_noise(&mut rng, h, w, cfg.region_scale * 2);
        let t = quantile_threshold(&land, cfg.land_fraction);
        for i in 0..n {
            mask[i] = (land[i] > t) as u8;
        }
    }

    let sod_codes: &[u8] = if cfg.context.is_some() { &[1, 4, 5] } else { &[1, 2, 3, 4, 5] };
    let mut attrs: Vec<IcePolygonAttrs> = (0..9).map(|r| sample_attrs(&mut rng, r, sod_codes)).collect();

    // Squares overwrite the region map; small ones get their SOD label flipped afterwards.
    let mut small_squares = Vec::new();
    if let Some(ctx) = &cfg.context {
        let mut placed: Vec<(usize, usize, usize)> = Vec::new();
        let mut sides: Vec<usize> = (0..ctx.squares)
            .map(|k| {
                let (lo, hi) = if k % 2 == 0 { ctx.small } else { ctx.large };
                rng.gen_range(lo..=hi)
            })
            .collect();
        // Large squares first, otherwise they rarely find room.
        sides.sort_unstable_by(|a, b| b.cmp(a));
        for (k, side) in sides.into_iter().enumerate() {
            for _ in 0..200 {
                let y = rng.gen_range(1..h - side);
                let x = rng.gen_range(1..w - side);
                let gap = ctx.small.0 / 2;
                let clear = placed.iter().all(|&(py, px, ps)| {
                    y + side + gap <= py || py + ps + gap <= y || x + side + gap <= px || px + ps + gap <= x
                });
                if clear {
                    placed.push((y, x, side));
                    let id = 100 + k as u32;
                    let floe = rng.gen_range(1..=6);
                    attrs.push(IcePolygonAttrs {
                        region: id,
                        total: 10,
                        partials: vec![PartialEntry { concentration: 10, sod: CONTEXT_SOURCE_SOD, floe }],
                    });
                    for yy in y..y + side {
                        for xx in x..x + side {
                            regions[yy * w + xx] = id;
                            mask[yy * w + xx] = 0;
                        }
                    }
                    if side < ctx.diameter {
                        small_squares.push(id);
                    }
                    break;
                }
            }
        }
    }

    let labels = derive_labels(&regions, &mask, &attrs)?;
    let mut sod = labels.sod;
    for i in 0..n {
        if small_squares.contains(&regions[i]) && sod[i] != IGNORE_INDEX {
            sod[i] = CONTEXT_SOD;
        }
    }

    let by_region = |r: u32| attrs.iter().find(|a| a.region == r).expect("every region has attrs");
    let ambiguity = cfg.ambiguity;
    let mut hh = vec![0.0f32; n];
    let mut hv = vec![0.0f32; n];
    let mut inc = vec![0.0f32; n];
    let region_hh: Vec<(u32, f64, f64)> = attrs
        .iter()
        .map(|a| (a.region, mix(a, WATER_HH, |p| hh_of(p.sod, ambiguity)), mix(a, WATER_HV, |p| hv_of(p.floe))))
        .collect();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            inc[i] = (20.0 + 25.0 * x as f64 / w as f64) as f32;
            let (bh, bv) = if mask[i] != 0 {
                (LAND, LAND)
            } else {
                let &(_, bh, bv) = region_hh.iter().find(|e| e.0 == regions[i]).expect("region present");
                (bh, bv)
            };
            hh[i] = (bh * speckle(&mut rng, cfg.speckle_looks)) as f32;
            hv[i] = (bv * speckle(&mut rng, cfg.speckle_looks)) as f32;
        }
    }

    let (ch_, cw) = (h / COARSE_FACTOR, w / COARSE_FACTOR);
    let mut coarse = Vec::new();
    let mut channels = vec![(HH.to_string(), hh), (HV.to_string(), hv), (INCIDENCE.to_string(), inc)];
    let names = all_channels();
    for ch in 0..2 * AMSR_FREQS.len() {
        let mut grid = vec![0.0f32; ch_ * cw];
        for gy in 0..ch_ {
            for gx in 0..cw {
                let mut acc = 0.0f64;
                for y in gy * COARSE_FACTOR..(gy + 1) * COARSE_FACTOR {
                    for x in gx * COARSE_FACTOR..(gx + 1) * COARSE_FACTOR {
                        let i = y * w + x;
                        acc += if mask[i] != 0 {
                            250.0
                        } else {
                            let a = by_region(regions[i]);
                            mix(a, tb_of(ch, 0), |p| tb_of(ch, p.sod))
                        };
                    }
                }
                let noise = rng.gen_range(-0.5..0.5);
                grid[gy * cw + gx] = (acc / (COARSE_FACTOR * COARSE_FACTOR) as f64 + noise) as f32;
            }
        }
        let up = no_grad(|| {
            let t = Tensor::new(&[1, 1, ch_, cw], grid.clone()).expect("grid shape");
            bilinear_upsample(&t, (h, w)).map(|u| u.to_vec())
        })?;
        coarse.push((names[3 + ch].clone(), grid));
        channels.push((names[3 + ch].clone(), up));
    }

    let bundle = SceneBundle {
        id: format!("syn-{:016x}-{index:03}", cfg.seed),
        height: h,
        width: w,
        channels,
        sic: labels.sic,
        sod,
        floe: labels.floe,
        mask,
    };
    bundle.validate()?;
    Ok(SyntheticScene { bundle, regions, attrs, coarse })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SyntheticConfig {
        SyntheticConfig { scenes: 2, height: 96, width: 128, region_scale: 32, ..Default::default() }
    }

    #[test]
    fn deterministic_under_seed() {
        let a = generate_synthetic(&small_cfg()).unwrap();
        let b = generate_synthetic(&small_cfg()).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&SyntheticConfig { seed: 1, ..small_cfg() }).unwrap();
        assert_ne!(a[0].channels, c[0].channels);
    }

    #[test]
    fn coarse_grid_is_sixteenth_resolution() {
        let s = generate_scene(&small_cfg(), 0).unwrap();
        assert_eq!(s.coarse.len(), 14);
        assert!(s.coarse.iter().all(|(_, g)| g.len() == (96 / 16) * (128 / 16)));
    }

    #[test]
    fn labels_follow_attrs() {
        let s = generate_scene(&small_cfg(), 1).unwrap();
        let d = derive_labels(&s.regions, &s.bundle.mask, &s.attrs).unwrap();
        assert_eq!(d.sic, s.bundle.sic);
        assert_eq!(d.sod, s.bundle.sod);
        assert!(d.missing.is_empty());
    }

    #[test]
    fn context_squares_flip_small_only() {
        let cfg = SyntheticConfig {
            height: 256,
            width: 256,
            land_fraction: 0.0,
            context: Some(ContextConfig { diameter: 64, small: (32, 48), large: (96, 112), squares: 2 }),
            ..small_cfg()
        };
        let s = generate_scene(&cfg, 0).unwrap();
        let count = |c: u8| s.bundle.sod.iter().filter(|&&v| v == c).count();
        assert!(count(CONTEXT_SOD) >= 32 * 32 && count(CONTEXT_SOD) <= 48 * 48);
        assert!(count(CONTEXT_SOURCE_SOD) >= 96 * 96);
    }
}
