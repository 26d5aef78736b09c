//! SIC R², SOD / FLOE F1 and the weighted combined score.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{padded_scene, PreparedScene};
use crate::error::{invalid, Error, Result};
use crate::model::{MultiTaskNet, Task, INPUT_MULTIPLE};
use crate::tensor::{no_grad, BnMode, Tensor, IGNORE_INDEX};

pub const WEIGHTS: [f64; 3] = [0.4, 0.4, 0.2];

pub fn combined_score(sic: f64, sod: f64, floe: f64) -> f64 {
    WEIGHTS[0] * sic + WEIGHTS[1] * sod + WEIGHTS[2] * floe
}

/// Pooled coefficient of determination over class indices.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct R2Accumulator {
    n: u64,
    sum_t: f64,
    sum_t2: f64,
    ss_res: f64,
}

impl R2Accumulator {
    pub fn add(&mut self, pred: &[u8], truth: &[u8]) {
        for (&p, &t) in pred.iter().zip(truth) {
            if t == IGNORE_INDEX {
                continue;
            }
            let (p, t) = (p as f64, t as f64);
            self.n += 1;
            self.sum_t += t;
            self.sum_t2 += t * t;
            self.ss_res += (p - t) * (p - t);
        }
    }

    pub fn merge(&mut self, other: &R2Accumulator) {
        self.n += other.n;
        self.sum_t += other.sum_t;
        self.sum_t2 += other.sum_t2;
        self.ss_res += other.ss_res;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    /// R² × 100, or `None` when fewer than two pixels or the truth is constant.
    pub fn score(&self) -> Option<f64> {
        if self.n < 2 {
            return None;
        }
        let ss_tot = self.sum_t2 - self.sum_t * self.sum_t / self.n as f64;
        if ss_tot <= 1e-12 * self.sum_t2.max(1.0) {
            return None;
        }
        Some(100.0 * (1.0 - self.ss_res / ss_tot))
    }
}

/// R² × 100 over pixels whose truth is not the ignore sentinel.
pub fn r2_score(pred: &[u8], truth: &[u8]) -> Option<f64> {
    let mut acc = R2Accumulator::default();
    acc.add(pred, truth);
    acc.score()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum F1Average {
    /// Support-weighted over classes present in the truth.
    #[default]
    Weighted,
    /// Unweighted over classes present in the truth.
    Macro,
}

impl FromStr for F1Average {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted" => Ok(Self::Weighted),
            "macro" => Ok(Self::Macro),
            _ => Err(invalid!("unknown F1 averaging `{s}` (expected weighted or macro)")),
        }
    }
}

impl fmt::Display for F1Average {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Weighted => "weighted",
            Self::Macro => "macro",
        })
    }
}

/// `counts[truth * k + pred]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn add(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        let k = self.classes;
        for (&p, &t) in pred.iter().zip(truth) {
            if t == IGNORE_INDEX {
                continue;
            }
            if p as usize >= k || t as usize >= k {
                return Err(invalid!("class index out of range for {k} classes (pred {p}, truth {t})"));
            }
            self.counts[t as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn support(&self, class: usize) -> u64 {
        (0..self.classes).map(|p| self.counts[class * self.classes + p]).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Per-class F1 in [0, 1]; 0/0 gives 0.
    pub fn per_class_f1(&self) -> Vec<f64> {
        let k = self.classes;
        (0..k)
            .map(|c| {
                let tp = self.counts[c * k + c] as f64;
                let fp = (0..k).filter(|&t| t != c).map(|t| self.counts[t * k + c]).sum::<u64>() as f64;
                let fn_ = (0..k).filter(|&p| p != c).map(|p| self.counts[c * k + p]).sum::<u64>() as f64;
                if tp == 0.0 {
                    0.0
                } else {
                    2.0 * tp / (2.0 * tp + fp + fn_)
                }
            })
            .collect()
    }

    /// Aggregate F1 × 100 over classes with nonzero support, or `None` without valid pixels.
    pub fn f1(&self, average: F1Average) -> Option<f64> {
        let per = self.per_class_f1();
        let present: Vec<usize> = (0..self.classes).filter(|&c| self.support(c) > 0).collect();
        if present.is_empty() {
            return None;
        }
        let score = match average {
            F1Average::Weighted => {
                let total: u64 = present.iter().map(|&c| self.support(c)).sum();
                present.iter().map(|&c| per[c] * self.support(c) as f64).sum::<f64>() / total as f64
            }
            F1Average::Macro => present.iter().map(|&c| per[c]).sum::<f64>() / present.len() as f64,
        };
        Some(100.0 * score)
    }
}

/// F1 × 100 and per-class F1 over pixels whose truth is valid.
pub fn f1_score(pred: &[u8], truth: &[u8], classes: usize, average: F1Average) -> Result<(Option<f64>, Vec<f64>)> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.add(pred, truth)?;
    Ok((cm.f1(average), cm.per_class_f1()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    /// `NaN` when R² is undefined (constant truth).
    #[serde(with = "nan_as_null")]
    pub sic_r2: f64,
    pub sod_f1: f64,
    pub floe_f1: f64,
    #[serde(with = "nan_as_null")]
    pub combined: f64,
    pub sod_per_class: Vec<f64>,
    pub floe_per_class: Vec<f64>,
    /// Valid pixels per task.
    pub pixels: [u64; 3],
}

/// JSON has no NaN; undefined scores are stored as `null`.
mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_some(v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// Running accumulation of all three task metrics.
#[derive(Debug, Clone)]
pub struct ScoreAccumulator {
    pub sic: R2Accumulator,
    pub sod: ConfusionMatrix,
    pub floe: ConfusionMatrix,
    pub sic_cm: ConfusionMatrix,
}

impl Default for ScoreAccumulator {
    fn default() -> Self {
        ScoreAccumulator {
            sic: R2Accumulator::default(),
            sod: ConfusionMatrix::new(Task::Sod.classes()),
            floe: ConfusionMatrix::new(Task::Floe.classes()),
            sic_cm: ConfusionMatrix::new(Task::Sic.classes()),
        }
    }
}

impl ScoreAccumulator {
    pub fn add(&mut self, pred: [&[u8]; 3], truth: [&[u8]; 3]) -> Result<()> {
        self.sic.add(pred[0], truth[0]);
        self.sic_cm.add(pred[0], truth[0])?;
        self.sod.add(pred[1], truth[1])?;
        self.floe.add(pred[2], truth[2])
    }

    pub fn report(&self, average: F1Average) -> ScoreReport {
        let sic_r2 = self.sic.score().unwrap_or(f64::NAN);
        let sod_f1 = self.sod.f1(average).unwrap_or(0.0);
        let floe_f1 = self.floe.f1(average).unwrap_or(0.0);
        ScoreReport {
            sic_r2,
            sod_f1,
            floe_f1,
            combined: combined_score(sic_r2, sod_f1, floe_f1),
            sod_per_class: self.sod.per_class_f1().iter().map(|v| v * 100.0).collect(),
            floe_per_class: self.floe.per_class_f1().iter().map(|v| v * 100.0).collect(),
            pixels: [self.sic.count(), self.sod.total(), self.floe.total()],
        }
    }
}

/// Per-pixel argmax over channels of `[1, K, H, W]` logits, cropped to `h × w`.
pub fn argmax(logits: &Tensor<f32>, h: usize, w: usize) -> Result<Vec<u8>> {
    let [_, k, ph, pw] = logits.dims4()?;
    let d = logits.data();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut best = (f32::NEG_INFINITY, 0u8);
            for c in 0..k {
                let v = d[(c * ph + y) * pw + x];
                if v > best.0 {
                    best = (v, c as u8);
                }
            }
            out.push(best.1);
        }
    }
    Ok(out)
}

/// Full-scene inference (zero-padded to a multiple of 32) in eval mode.
pub fn predict_scene(net: &mut MultiTaskNet<f32>, scene: &PreparedScene) -> Result<[Vec<u8>; 3]> {
    let prev = net.mode();
    net.set_mode(BnMode::Eval);
    let batch = padded_scene(scene, INPUT_MULTIPLE)?;
    let out = no_grad(|| net.forward(&batch.inputs));
    net.set_mode(prev);
    let out = out?;
    let (h, w) = (scene.height(), scene.width());
    Ok([argmax(&out.sic, h, w)?, argmax(&out.sod, h, w)?, argmax(&out.floe, h, w)?])
}

/// Pooled scores of a network over whole scenes.
pub fn evaluate(net: &mut MultiTaskNet<f32>, scenes: &[PreparedScene], average: F1Average) -> Result<ScoreReport> {
    let mut acc = ScoreAccumulator::default();
    for s in scenes {
        let pred = predict_scene(net, s)?;
        acc.add(
            [&pred[0], &pred[1], &pred[2]],
            [&s.labels[0], &s.labels[1], &s.labels[2]],
        )?;
    }
    Ok(acc.report(average))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn r2_hand_value() {
        assert_eq!(r2_score(&[0, 1, 2, 2], &[0, 1, 2, 3]), Some(80.0));
        assert_eq!(r2_score(&[3, 1, 2], &[3, 1, 2]), Some(100.0));
        assert_eq!(r2_score(&[2, 2], &[2, 2]), None);
    }

    #[test]
    fn r2_of_mean_prediction_is_zero() {
        let truth = [0u8, 2, 4, 6];
        assert!(r2_score(&[3, 3, 3, 3], &truth).unwrap().abs() < 1e-12);
    }

    #[test]
    fn f1_binary_hand_value() {
        // Class 1: TP 2, FP 1, FN 1. Class 0: TP 6, FP 1, FN 1.
        let truth = [0, 0, 0, 0, 0, 0, 0, 1, 1, 1];
        let pred = [0, 0, 0, 0, 0, 0, 1, 1, 1, 0];
        let (agg, per) = f1_score(&pred, &truth, 2, F1Average::Weighted).unwrap();
        assert!((per[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!((per[0] - 6.0 / 7.0).abs() < 1e-12);
        assert!((agg.unwrap() - 80.0).abs() < 1e-9);
        let (mac, _) = f1_score(&pred, &truth, 2, F1Average::Macro).unwrap();
        assert!((mac.unwrap() - 50.0 * (6.0 / 7.0 + 2.0 / 3.0)).abs() < 1e-9);
    }

    #[test]
    fn absent_class_excluded() {
        let (agg, _) = f1_score(&[0, 1], &[0, 1], 5, F1Average::Macro).unwrap();
        assert_eq!(agg, Some(100.0));
    }

    #[test]
    fn combined_rows() {
        assert!((combined_score(87.34, 80.66, 71.885) - 81.577).abs() < 1e-9);
        assert!((combined_score(75.95, 76.09, 69.39) - 74.694).abs() < 1e-9);
        assert_eq!(combined_score(100.0, 100.0, 100.0), 100.0);
    }
}
