//! Checkpoint directory: `manifest.json` plus one little-endian f32 blob per tensor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::MultiTaskNet;
use super::spec::ModelSpec;
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlobKind {
    Parameter,
    RunningMean,
    RunningVar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub file: String,
    pub kind: BlobKind,
    pub shape: Vec<usize>,
    /// Running-statistic update count; zero for parameters.
    #[serde(default)]
    pub updates: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub spec: ModelSpec,
    /// Free-form run metadata (feature group, epoch, validation loss, ...).
    #[serde(default)]
    pub metadata: serde_json::Map<String, serde_json::Value>,
    pub tensors: Vec<BlobEntry>,
}

pub fn write_f32(path: &Path, values: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f32(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format(path, format!("length {} is not a multiple of 4", bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

impl MultiTaskNet<f32> {
    pub fn save(&self, dir: &Path, metadata: serde_json::Map<String, serde_json::Value>) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tensors = Vec::new();
        for p in self.parameters() {
            let file = format!("{}.f32", p.name);
            write_f32(&dir.join(&file), &p.tensor.data())?;
            tensors.push(BlobEntry {
                name: p.name.clone(),
                file,
                kind: BlobKind::Parameter,
                shape: p.tensor.shape().to_vec(),
                updates: 0,
            });
        }
        for bn in self.norms() {
            let stats = bn.running.borrow();
            for (kind, suffix, values) in [
                (BlobKind::RunningMean, "mean", &stats.mean),
                (BlobKind::RunningVar, "var", &stats.var),
            ] {
                let name = format!("{}.{suffix}", bn.name);
                let file = format!("{name}.f32");
                write_f32(&dir.join(&file), values)?;
                tensors.push(BlobEntry {
                    name,
                    file,
                    kind,
                    shape: vec![values.len()],
                    updates: stats.updates,
                });
            }
        }
        let manifest = Manifest {
            version: FORMAT_VERSION,
            spec: self.spec().clone(),
            metadata,
            tensors,
        };
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn read_manifest(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        if m.version != FORMAT_VERSION {
            return Err(Error::format(&path, format!("unsupported checkpoint version {}", m.version)));
        }
        Ok(m)
    }

    /// Rebuilds the network from the stored spec and overwrites every tensor.
    pub fn load(dir: &Path) -> Result<(Self, Manifest)> {
        let manifest = Self::read_manifest(dir)?;
        let net = MultiTaskNet::build(&manifest.spec, 0)?;
        let params = net.parameters();
        let norms = net.norms();
        let bad = |msg: String| Error::format(dir.join(MANIFEST), msg);
        let mut seen = 0usize;
        for entry in &manifest.tensors {
            let values = read_f32(&dir.join(&entry.file))?;
            if values.len() != entry.shape.iter().product::<usize>() {
                return Err(bad(format!("blob {} has {} values for shape {:?}", entry.file, values.len(), entry.shape)));
            }
            match entry.kind {
                BlobKind::Parameter => {
                    let p = params
                        .iter()
                        .find(|p| p.name == entry.name)
                        .ok_or_else(|| bad(format!("unknown parameter `{}`", entry.name)))?;
                    if p.tensor.shape() != entry.shape.as_slice() {
                        return Err(bad(format!(
                            "parameter `{}` shape {:?} does not match model {:?}",
                            entry.name,
                            entry.shape,
                            p.tensor.shape()
                        )));
                    }
                    p.tensor.set_data(&values)?;
                    seen += 1;
                }
                BlobKind::RunningMean | BlobKind::RunningVar => {
                    let (base, _) = entry.name.rsplit_once('.').ok_or_else(|| bad(format!("bad name `{}`", entry.name)))?;
                    let bn = norms
                        .iter()
                        .find(|b| b.name == base)
                        .ok_or_else(|| bad(format!("unknown running statistic `{}`", entry.name)))?;
                    let mut stats = bn.running.borrow_mut();
                    let slot = if entry.kind == BlobKind::RunningMean { &mut stats.mean } else { &mut stats.var };
                    if slot.len() != values.len() {
                        return Err(bad(format!("running statistic `{}` has wrong length", entry.name)));
                    }
                    slot.copy_from_slice(&values);
                    stats.updates = entry.updates;
                }
            }
        }
        if seen != params.len() {
            return Err(bad(format!("checkpoint holds {seen} of {} parameters", params.len())));
        }
        Ok((net, manifest))
    }
}
