//! Feature groups and per-channel standardization.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::scene::{amsr, ChannelStats, SceneBundle, AMSR_FREQS, HH, HV, INCIDENCE};
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FeatureGroup {
    G1,
    G2,
    G3,
    G4,
    G5,
    G6,
}

impl FeatureGroup {
    pub const ALL: [FeatureGroup; 6] = [Self::G1, Self::G2, Self::G3, Self::G4, Self::G5, Self::G6];

    pub fn index(self) -> usize {
        self as usize + 1
    }

    /// Channel names in their fixed stacking order.
    pub fn channels(self) -> Vec<String> {
        let sar = || [HH, HV, INCIDENCE].map(String::from).to_vec();
        let amsr_pair = || vec![amsr("18.7", 'h'), amsr("18.7", 'v'), amsr("36.5", 'h'), amsr("36.5", 'v')];
        let amsr_all = || AMSR_FREQS.iter().flat_map(|f| [amsr(f, 'h'), amsr(f, 'v')]).collect::<Vec<_>>();
        match self {
            Self::G1 => sar(),
            Self::G2 => amsr_pair(),
            Self::G3 => vec![amsr("18.7", 'v'), amsr("36.5", 'h'), amsr("36.5", 'v'), amsr("23.8", 'v')],
            Self::G4 => amsr_all(),
            Self::G5 => [sar(), amsr_pair()].concat(),
            Self::G6 => [sar(), amsr_all()].concat(),
        }
    }

    #[allow(clippy::len_without_is_empty)]
    pub fn len(self) -> usize {
        self.channels().len()
    }
}

impl fmt::Display for FeatureGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "g{}", self.index())
    }
}

impl FromStr for FeatureGroup {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        let digit = t.strip_prefix('g').unwrap_or(&t);
        match digit.parse::<usize>() {
            Ok(i @ 1..=6) => Ok(Self::ALL[i - 1]),
            _ => Err(invalid!("unknown feature group `{s}` (expected g1..g6)")),
        }
    }
}

/// Standardized `[C, H, W]` stack.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub values: Vec<f32>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Channels whose std was zero; they were centered but not scaled.
    pub centered_only: Vec<String>,
}

impl FeatureStack {
    pub fn tensor(&self) -> Tensor<f32> {
        Tensor::new(&[1, self.channels, self.height, self.width], self.values.clone()).expect("shape matches")
    }
}

/// Stacks the group's channels in declared order and applies `(x − mean) / std`.
pub fn select_features(scene: &SceneBundle, group: FeatureGroup, stats: &HashMap<String, ChannelStats>) -> Result<FeatureStack> {
    let names = group.channels();
    let n = scene.pixels();
    let mut values = Vec::with_capacity(names.len() * n);
    let mut centered_only = Vec::new();
    for name in &names {
        let raw = scene.channel(name).ok_or_else(|| Error::MissingChannel(name.clone()))?;
        let s = stats.get(name).ok_or_else(|| Error::MissingChannel(format!("{name} (statistics)")))?;
        let inv = if s.std > 0.0 {
            1.0 / s.std
        } else {
            log::warn!("channel {name} has zero standard deviation; centering only");
            centered_only.push(name.clone());
            1.0
        };
        values.extend(raw.iter().map(|&x| ((x as f64 - s.mean) * inv) as f32));
    }
    Ok(FeatureStack {
        values,
        channels: names.len(),
        height: scene.height,
        width: scene.width,
        centered_only,
    })
}

/// Pooled statistics over the unmasked pixels of several scenes.
pub fn dataset_stats(scenes: &[SceneBundle]) -> HashMap<String, ChannelStats> {
    let mut acc: HashMap<String, (usize, f64, f64)> = HashMap::new();
    for s in scenes {
        for (name, v) in &s.channels {
            let e = acc.entry(name.clone()).or_default();
            for (x, _) in v.iter().zip(&s.mask).filter(|(_, &m)| m == 0) {
                e.0 += 1;
                e.1 += *x as f64;
                e.2 += (*x as f64) * (*x as f64);
            }
        }
    }
    acc.into_iter()
        .map(|(k, (n, s, s2))| {
            let st = if n == 0 {
                ChannelStats { mean: 0.0, std: 0.0 }
            } else {
                let mean = s / n as f64;
                ChannelStats {
                    mean,
                    std: (s2 / n as f64 - mean * mean).max(0.0).sqrt(),
                }
            };
            (k, st)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_channel_counts() {
        assert_eq!(FeatureGroup::ALL.map(FeatureGroup::len), [3, 4, 4, 14, 7, 17]);
    }

    #[test]
    fn g3_order() {
        assert_eq!(
            FeatureGroup::G3.channels(),
            ["amsr_18.7_v", "amsr_36.5_h", "amsr_36.5_v", "amsr_23.8_v"]
        );
    }

    #[test]
    fn parse_groups() {
        assert_eq!("g5".parse::<FeatureGroup>().unwrap(), FeatureGroup::G5);
        assert_eq!("3".parse::<FeatureGroup>().unwrap(), FeatureGroup::G3);
        assert!("g7".parse::<FeatureGroup>().is_err());
    }
}
