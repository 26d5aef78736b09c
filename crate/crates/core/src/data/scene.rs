//! Scene directory container: `manifest` + `<channel>.raw` (f32 LE) + `<label>.lbl` (u8).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::Task;
use crate::tensor::IGNORE_INDEX;

pub const MANIFEST: &str = "manifest";

pub const HH: &str = "HH";
pub const HV: &str = "HV";
pub const INCIDENCE: &str = "incidence_angle";

/// AMSR2 frequencies in GHz, as they appear in channel names.
pub const AMSR_FREQS: [&str; 7] = ["6.9", "7.3", "10.7", "18.7", "23.8", "36.5", "89.0"];

/// `amsr_<freq>_<pol>` with `pol` in {h, v}.
pub fn amsr(freq: &str, pol: char) -> String {
    format!("amsr_{freq}_{pol}")
}

/// All 17 channel names in canonical order.
pub fn all_channels() -> Vec<String> {
    let mut v = vec![HH.to_string(), HV.to_string(), INCIDENCE.to_string()];
    for f in AMSR_FREQS {
        v.push(amsr(f, 'h'));
        v.push(amsr(f, 'v'));
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

impl ChannelStats {
    /// Population mean and standard deviation of the unmasked values.
    pub fn of<'a>(values: impl IntoIterator<Item = &'a f32>) -> Self {
        let (mut n, mut s, mut s2) = (0usize, 0.0f64, 0.0f64);
        for &v in values {
            n += 1;
            s += v as f64;
            s2 += (v as f64) * (v as f64);
        }
        if n == 0 {
            return ChannelStats { mean: 0.0, std: 0.0 };
        }
        let mean = s / n as f64;
        ChannelStats {
            mean,
            std: (s2 / n as f64 - mean * mean).max(0.0).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelEntry {
    pub name: String,
    #[serde(flatten)]
    pub stats: ChannelStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub sic: usize,
    pub sod: usize,
    pub floe: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub channels: Vec<ChannelEntry>,
    pub classes: LabelCounts,
}

/// Multi-channel raster stack with its three label rasters and land mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub id: String,
    pub height: usize,
    pub width: usize,
    /// Named rasters in storage order.
    pub channels: Vec<(String, Vec<f32>)>,
    pub sic: Vec<u8>,
    pub sod: Vec<u8>,
    pub floe: Vec<u8>,
    /// 1 = land / masked.
    pub mask: Vec<u8>,
}

impl SceneBundle {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, name: &str) -> Option<&[f32]> {
        self.channels.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn labels(&self, task: Task) -> &[u8] {
        match task {
            Task::Sic => &self.sic,
            Task::Sod => &self.sod,
            Task::Floe => &self.floe,
        }
    }

    /// Per-channel statistics over unmasked pixels.
    pub fn channel_stats(&self) -> Vec<ChannelEntry> {
        self.channels
            .iter()
            .map(|(name, v)| ChannelEntry {
                name: name.clone(),
                stats: ChannelStats::of(v.iter().zip(&self.mask).filter(|(_, &m)| m == 0).map(|(x, _)| x)),
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.pixels();
        if n == 0 {
            return Err(invalid!("scene `{}` has zero area", self.id));
        }
        for (name, v) in &self.channels {
            if v.len() != n {
                return Err(invalid!("scene `{}` channel `{name}` has {} values, expected {n}", self.id, v.len()));
            }
        }
        for (task, lbl) in Task::ALL.iter().map(|&t| (t, self.labels(t))) {
            if lbl.len() != n {
                return Err(invalid!("scene `{}` {task} raster has {} values, expected {n}", self.id, lbl.len()));
            }
            if let Some(bad) = lbl.iter().find(|&&v| v != IGNORE_INDEX && v as usize >= task.classes()) {
                return Err(invalid!("scene `{}` {task} label {bad} out of range", self.id));
            }
        }
        if self.mask.len() != n {
            return Err(invalid!("scene `{}` mask has {} values, expected {n}", self.id, self.mask.len()));
        }
        let leaked = (0..n).any(|i| self.mask[i] != 0 && (self.sic[i] != IGNORE_INDEX || self.sod[i] != IGNORE_INDEX || self.floe[i] != IGNORE_INDEX));
        if leaked {
            return Err(invalid!("scene `{}` has labels on masked pixels", self.id));
        }
        Ok(())
    }

    pub fn manifest(&self) -> SceneManifest {
        SceneManifest {
            id: self.id.clone(),
            height: self.height,
            width: self.width,
            channels: self.channel_stats(),
            classes: LabelCounts {
                sic: Task::Sic.classes(),
                sod: Task::Sod.classes(),
                floe: Task::Floe.classes(),
            },
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, values) in &self.channels {
            crate::model::checkpoint::write_f32(&dir.join(format!("{name}.raw")), values)?;
        }
        for (file, raster) in [("sic", &self.sic), ("sod", &self.sod), ("floe", &self.floe), ("mask", &self.mask)] {
            let path = dir.join(format!("{file}.lbl"));
            fs::write(&path, raster).map_err(|e| Error::io(&path, e))?;
        }
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&self.manifest()).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: SceneManifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        let n = m.height * m.width;
        let mut channels = Vec::with_capacity(m.channels.len());
        for c in &m.channels {
            let p = dir.join(format!("{}.raw", c.name));
            let v = crate::model::checkpoint::read_f32(&p)?;
            if v.len() != n {
                return Err(Error::format(&p, format!("{} values, expected {n}", v.len())));
            }
            channels.push((c.name.clone(), v));
        }
        let read_lbl = |file: &str| -> Result<Vec<u8>> {
            let p = dir.join(format!("{file}.lbl"));
            let v = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            if v.len() != n {
                return Err(Error::format(&p, format!("{} bytes, expected {n}", v.len())));
            }
            Ok(v)
        };
        let scene = SceneBundle {
            id: m.id,
            height: m.height,
            width: m.width,
            channels,
            sic: read_lbl("sic")?,
            sod: read_lbl("sod")?,
            floe: read_lbl("floe")?,
            mask: read_lbl("mask")?,
        };
        scene.validate().map_err(|e| Error::format(dir, e.to_string()))?;
        Ok(scene)
    }
}

/// Reads every scene directory (one holding a `manifest`) under `root`, sorted by name.
pub fn read_dataset(root: &Path) -> Result<Vec<SceneBundle>> {
    let mut dirs: Vec<_> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::format(root, "no scene directories found"));
    }
    dirs.iter().map(|d| SceneBundle::read(d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_channels() {
        let all = all_channels();
        assert_eq!(all.len(), 17);
        assert_eq!(all[3], "amsr_6.9_h");
        assert_eq!(all[16], "amsr_89.0_v");
    }

    #[test]
    fn stats_of_constant() {
        let s = ChannelStats::of(&[2.0f32, 2.0, 2.0]);
        assert_eq!((s.mean, s.std), (2.0, 0.0));
    }
}
