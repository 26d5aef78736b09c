//! Whole-scene train / validation split with matched class histograms.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::scene::SceneBundle;
use crate::error::{invalid, Result};
use crate::model::Task;
use crate::tensor::IGNORE_INDEX;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    /// Chi-square statistic per task between train and validation SOD/SIC/FLOE histograms.
    pub chi_square: [f64; 3],
}

fn histogram(scene: &SceneBundle, task: Task) -> Vec<f64> {
    let mut h = vec![0.0; task.classes()];
    for &v in scene.labels(task) {
        if v != IGNORE_INDEX {
            h[v as usize] += 1.0;
        }
    }
    h
}

/// Pearson chi-square of a 2×K contingency table, skipping empty columns.
pub fn chi_square(a: &[f64], b: &[f64]) -> f64 {
    let (ta, tb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    let total = ta + tb;
    if ta == 0.0 || tb == 0.0 {
        return 0.0;
    }
    a.iter()
        .zip(b)
        .filter(|(x, y)| **x + **y > 0.0)
        .map(|(&x, &y)| {
            let col = x + y;
            let (ea, eb) = (col * ta / total, col * tb / total);
            (x - ea).powi(2) / ea + (y - eb).powi(2) / eb
        })
        .sum()
}

/// Seeded split stratified on each scene's dominant SOD class.
pub fn split_scenes(scenes: &[SceneBundle], val_count: usize, seed: u64) -> Result<SceneSplit> {
    if val_count == 0 || val_count >= scenes.len() {
        return Err(invalid!("validation count {val_count} must lie in 1..{}", scenes.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dominant = |s: &SceneBundle| {
        let h = histogram(s, Task::Sod);
        (0..h.len()).max_by(|&a, &b| h[a].total_cmp(&h[b])).unwrap_or(0)
    };
    let mut strata: Vec<Vec<usize>> = vec![Vec::new(); Task::Sod.classes()];
    for (i, s) in scenes.iter().enumerate() {
        strata[dominant(s)].push(i);
    }
    // Round-robin across shuffled strata approximates proportional allocation.
    let mut order = Vec::with_capacity(scenes.len());
    for s in &mut strata {
        s.shuffle(&mut rng);
    }
    let longest = strata.iter().map(Vec::len).max().unwrap_or(0);
    for k in 0..longest {
        for s in &strata {
            if let Some(&i) = s.get(k) {
                order.push(i);
            }
        }
    }
    let stride = scenes.len() as f64 / val_count as f64;
    let mut val: Vec<usize> = (0..val_count).map(|k| order[(k as f64 * stride) as usize]).collect();
    val.sort_unstable();
    let train: Vec<usize> = (0..scenes.len()).filter(|i| !val.contains(i)).collect();
    let sum = |idx: &[usize], task: Task| {
        let mut acc = vec![0.0; task.classes()];
        for &i in idx {
            for (a, b) in acc.iter_mut().zip(histogram(&scenes[i], task)) {
                *a += b;
            }
        }
        acc
    };
    let chi = Task::ALL.map(|t| chi_square(&sum(&train, t), &sum(&val, t)));
    log::info!("scene split: {} train / {} val, chi-square sic {:.1} sod {:.1} floe {:.1}", train.len(), val.len(), chi[0], chi[1], chi[2]);
    Ok(SceneSplit { train, val, chi_square: chi })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_histograms_give_zero() {
        assert_eq!(chi_square(&[10.0, 20.0, 0.0], &[5.0, 10.0, 0.0]), 0.0);
        assert!(chi_square(&[10.0, 0.0], &[0.0, 10.0]) > 19.0);
    }
}
