//! Grad-CAM heatmaps for one class of one task decoder.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::checkpoint::{read_f32, write_f32};
use crate::model::{MultiTaskNet, Task};
use crate::tensor::{bilinear_upsample, no_grad, BnMode, Real, Tensor};

/// Decoder activation used when no layer is named: the last 3×3 ConvBnReLU.
pub const DEFAULT_LAYER: &str = "conv4";

/// Which output pixels contribute to the class score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CamTarget {
    /// Sum of the class logit over every valid pixel.
    #[default]
    All,
    /// Only valid pixels whose arg-max prediction is the class.
    Predicted,
}

impl FromStr for CamTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(CamTarget::All),
            "predicted" => Ok(CamTarget::Predicted),
            _ => Err(invalid!("unknown Grad-CAM target `{s}` (expected all or predicted)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCamConfig {
    pub task: Task,
    pub class: usize,
    pub layer: String,
    pub target: CamTarget,
}

impl GradCamConfig {
    pub fn new(task: Task, class: usize) -> Self {
        GradCamConfig {
            task,
            class,
            layer: DEFAULT_LAYER.to_string(),
            target: CamTarget::All,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    #[serde(skip)]
    pub values: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub task: Task,
    pub class: usize,
    pub layer: String,
    pub input_id: String,
}

/// `ReLU(Σ_k w_k A_k)` with `w_k` the spatial mean of `∂score/∂A_k`, upsampled and scaled by its maximum.
///
/// `activation` and `gradient` are `[C, h, w]`. An all-zero map stays all-zero.
pub fn cam_from_activation<T: Real>(
    activation: &[T],
    gradient: &[T],
    channels: usize,
    feature: (usize, usize),
    out: (usize, usize),
) -> Result<Vec<f32>> {
    let hw = feature.0 * feature.1;
    if activation.len() != channels * hw || gradient.len() != channels * hw {
        return Err(invalid!(
            "activation/gradient sizes {}/{} do not match {channels}x{}x{}",
            activation.len(),
            gradient.len(),
            feature.0,
            feature.1
        ));
    }
    let mut map = vec![0.0f64; hw];
    for k in 0..channels {
        let g = &gradient[k * hw..(k + 1) * hw];
        let weight = g.iter().map(|v| v.as_f64()).sum::<f64>() / hw as f64;
        if weight == 0.0 {
            continue;
        }
        for (m, a) in map.iter_mut().zip(&activation[k * hw..(k + 1) * hw]) {
            *m += weight * a.as_f64();
        }
    }
    map.iter_mut().for_each(|m| *m = m.max(0.0));
    let small = Tensor::<f64>::new(&[1, 1, feature.0, feature.1], map)?;
    let up = no_grad(|| bilinear_upsample(&small, out))?.to_vec();
    Ok(normalize(&up))
}

/// Divides by the maximum; maps with no positive value become all-zero.
pub fn normalize(map: &[f64]) -> Vec<f32> {
    let max = map.iter().copied().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return vec![0.0; map.len()];
    }
    map.iter().map(|&v| (v.max(0.0) / max) as f32).collect()
}

/// Grad-CAM of `input` (`[1, C, H, W]`). `valid` marks pixels that count toward the score.
pub fn compute_gradcam<T: Real>(
    net: &mut MultiTaskNet<T>,
    input: &Tensor<T>,
    valid: Option<&[bool]>,
    cfg: &GradCamConfig,
    input_id: &str,
) -> Result<Heatmap> {
    let classes = cfg.task.classes();
    if cfg.class >= classes {
        return Err(invalid!("class {} outside 0..{classes} for task {}", cfg.class, cfg.task.name()));
    }
    let [n, _, h, w] = input.dims4()?;
    if n != 1 {
        return Err(invalid!("Grad-CAM takes a single input, got batch {n}"));
    }
    if let Some(v) = valid {
        if v.len() != h * w {
            return Err(invalid!("valid mask has {} entries for a {h}x{w} input", v.len()));
        }
    }
    let prev = net.mode();
    net.set_mode(BnMode::Eval);
    let result = run(net, input, valid, cfg, (h, w));
    net.zero_grad();
    net.set_mode(prev);
    let values = result?;
    Ok(Heatmap {
        values,
        height: h,
        width: w,
        task: cfg.task,
        class: cfg.class,
        layer: cfg.layer.clone(),
        input_id: input_id.to_string(),
    })
}

fn run<T: Real>(
    net: &MultiTaskNet<T>,
    input: &Tensor<T>,
    valid: Option<&[bool]>,
    cfg: &GradCamConfig,
    (h, w): (usize, usize),
) -> Result<Vec<f32>> {
    let out = net.forward_task(input, cfg.task)?;
    let layer = out.tap(&cfg.layer).ok_or_else(|| {
        invalid!("unknown Grad-CAM layer `{}` (expected one of aspp, conv1..conv4, head)", cfg.layer)
    })?;
    layer.retain_grad();
    let [_, channels, fh, fw] = layer.dims4()?;

    let hw = h * w;
    let logits = out.logits.data();
    let k = cfg.task.classes();
    let mut upstream = vec![T::zero(); k * hw];
    for p in 0..hw {
        if valid.is_some_and(|v| !v[p]) {
            continue;
        }
        if cfg.target == CamTarget::Predicted {
            let best = (0..k)
                .max_by(|&a, &b| logits[a * hw + p].partial_cmp(&logits[b * hw + p]).unwrap_or(std::cmp::Ordering::Equal))
                .expect("at least one class");
            if best != cfg.class {
                continue;
            }
        }
        upstream[cfg.class * hw + p] = T::one();
    }
    drop(logits);
    out.logits.backward_with(&upstream)?;
    let activation = layer.data();
    let gradient = layer.grad().unwrap_or_else(|| vec![T::zero(); activation.len()]);
    cam_from_activation(&activation, &gradient, channels, (fh, fw), (h, w))
}

/// 8-bit binary graymap of values in `[0, 1]`.
pub fn to_pgm(values: &[f32], height: usize, width: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Paths written by [`export_heatmap`] for a given stem.
pub fn heatmap_paths(stem: &Path) -> [PathBuf; 3] {
    ["raw", "pgm", "json"].map(|ext| stem.with_extension(ext))
}

/// Writes `<stem>.raw` (little-endian f32), `<stem>.pgm` and `<stem>.json` (metadata).
pub fn export_heatmap(hm: &Heatmap, stem: &Path) -> Result<()> {
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let [raw, pgm, json] = heatmap_paths(stem);
    write_f32(&raw, &hm.values)?;
    fs::write(&pgm, to_pgm(&hm.values, hm.height, hm.width)).map_err(|e| Error::io(&pgm, e))?;
    let text = serde_json::to_string_pretty(hm).expect("heatmap metadata serializes");
    fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))
}

pub fn read_heatmap(stem: &Path) -> Result<Heatmap> {
    let [raw, _, json] = heatmap_paths(stem);
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let mut hm: Heatmap = serde_json::from_str(&text).map_err(|e| Error::format(&json, e.to_string()))?;
    hm.values = read_f32(&raw)?;
    if hm.values.len() != hm.height * hm.width {
        return Err(Error::format(&raw, format!("{} values, expected {}", hm.values.len(), hm.height * hm.width)));
    }
    Ok(hm)
}
