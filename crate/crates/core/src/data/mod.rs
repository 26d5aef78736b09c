//! Scene container, label derivation, feature selection, patch sampling and synthetic data.

pub mod features;
pub mod labels;
pub mod sampler;
pub mod scene;
pub mod split;
pub mod synthetic;

use std::collections::HashMap;

pub use features::{dataset_stats, select_features, FeatureGroup, FeatureStack};
pub use labels::{derive_labels, DerivedLabels, IcePolygonAttrs, PartialEntry};
pub use sampler::{sample_patches, PatchView, SampleReport, SamplerConfig};
pub use scene::{read_dataset, ChannelStats, SceneBundle, MANIFEST};
pub use split::{split_scenes, SceneSplit};
pub use synthetic::{generate_scene, generate_synthetic, ContextConfig, SyntheticConfig, SyntheticScene};

use crate::error::{shape_err, Result};
use crate::model::Task;
use crate::tensor::{Tensor, IGNORE_INDEX};

/// Standardized features and labels of one scene, ready for cropping.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub id: String,
    pub features: FeatureStack,
    /// SIC, SOD, FLOE; masked pixels are already the ignore sentinel.
    pub labels: [Vec<u8>; 3],
}

impl PreparedScene {
    pub fn new(scene: &SceneBundle, group: FeatureGroup, stats: &HashMap<String, ChannelStats>) -> Result<Self> {
        let features = select_features(scene, group, stats)?;
        let masked = |lbl: &[u8]| -> Vec<u8> {
            lbl.iter().zip(&scene.mask).map(|(&l, &m)| if m != 0 { IGNORE_INDEX } else { l }).collect()
        };
        Ok(PreparedScene {
            id: scene.id.clone(),
            features,
            labels: Task::ALL.map(|t| masked(scene.labels(t))),
        })
    }

    pub fn height(&self) -> usize {
        self.features.height
    }

    pub fn width(&self) -> usize {
        self.features.width
    }

    pub fn channels(&self) -> usize {
        self.features.channels
    }
}

/// A mini-batch: `[N, C, S, S]` inputs and flattened `[N, S, S]` targets per task.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Tensor<f32>,
    pub targets: [Vec<u8>; 3],
}

/// A patch of a prepared scene, addressed by scene index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchRef {
    pub scene: usize,
    pub view: PatchView,
}

pub fn assemble_batch(scenes: &[PreparedScene], patches: &[PatchRef]) -> Result<Batch> {
    let first = patches.first().ok_or_else(|| shape_err!("empty batch"))?;
    let s = first.view.size;
    let c = scenes[first.scene].channels();
    let mut inputs = Vec::with_capacity(patches.len() * c * s * s);
    let mut targets: [Vec<u8>; 3] = Default::default();
    for p in patches {
        let sc = &scenes[p.scene];
        if p.view.size != s || sc.channels() != c {
            return Err(shape_err!("batch mixes patch sizes or channel counts"));
        }
        let (h, w) = (sc.height(), sc.width());
        for ch in 0..c {
            for y in p.view.y..p.view.y + s {
                let row = (ch * h + y) * w + p.view.x;
                inputs.extend_from_slice(&sc.features.values[row..row + s]);
            }
        }
        for (t, lbl) in targets.iter_mut().zip(&sc.labels) {
            for y in p.view.y..p.view.y + s {
                t.extend_from_slice(&lbl[y * w + p.view.x..y * w + p.view.x + s]);
            }
        }
    }
    Ok(Batch {
        inputs: Tensor::new(&[patches.len(), c, s, s], inputs)?,
        targets,
    })
}

/// Whole scene zero-padded at the bottom/right to a multiple of `multiple`; padding is ignored in targets.
pub fn padded_scene(scene: &PreparedScene, multiple: usize) -> Result<Batch> {
    let (h, w, c) = (scene.height(), scene.width(), scene.channels());
    let ph = h.div_ceil(multiple) * multiple;
    let pw = w.div_ceil(multiple) * multiple;
    let mut inputs = vec![0.0f32; c * ph * pw];
    for ch in 0..c {
        for y in 0..h {
            let src = (ch * h + y) * w;
            let dst = (ch * ph + y) * pw;
            inputs[dst..dst + w].copy_from_slice(&scene.features.values[src..src + w]);
        }
    }
    let targets = scene.labels.clone().map(|lbl| {
        let mut t = vec![IGNORE_INDEX; ph * pw];
        for y in 0..h {
            t[y * pw..y * pw + w].copy_from_slice(&lbl[y * w..(y + 1) * w]);
        }
        t
    });
    Ok(Batch {
        inputs: Tensor::new(&[1, c, ph, pw], inputs)?,
        targets,
    })
}
