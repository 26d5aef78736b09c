//! Experiment grid over feature groups × atrous-rate triplets × repeats.
//!
//! Each cell × repeat trains one network with a seed derived from the master
//! seed, saves a checkpoint and writes `score.json` last, atomically. A cell
//! with a readable `score.json` counts as done, so an interrupted grid resumes
//! where it stopped. The report is always rendered from the stored scores.

pub mod config;
pub mod report;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde_json::{json, Map, Value};

pub use config::ExperimentConfig;
pub use report::{
    render_report, render_scene_report, write_atomic, write_report, Averaged, RepeatOutcome, RepeatScore, ReportRow,
    REPORT_HEADER, SCENE_HEADER,
};

use crate::data::{
    dataset_stats, generate_synthetic, read_dataset, sample_patches, split_scenes, ChannelStats, FeatureGroup, PatchRef,
    PreparedScene, SamplerConfig, SceneBundle,
};
use crate::error::{Error, Result};
use crate::metrics::{predict_scene, F1Average, ScoreAccumulator, ScoreReport};
use crate::model::{AsppRates, Manifest, ModelSpec, MultiTaskNet};
use crate::training::{train_loop, RunLog, TrainConfig};

/// Environment variable holding the number of grid workers.
pub const THREADS_ENV: &str = "ASPP_SCOPE_THREADS";

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Seed of one cell × repeat; a pure function of its inputs.
pub fn cell_seed(master: u64, group: FeatureGroup, rates: AsppRates, repeat: usize) -> u64 {
    splitmix64(master ^ splitmix64(fnv1a(&format!("{group}/{rates}/{repeat}"))))
}

pub fn cell_dir(out: &Path, group: FeatureGroup, rates: AsppRates, repeat: usize) -> PathBuf {
    out.join("cells").join(format!("{group}_{rates}_r{repeat}"))
}

pub const SCORE_FILE: &str = "score.json";
pub const RUNLOG_FILE: &str = "runlog.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Scenes split into training, validation and held-out test sets.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<SceneBundle>,
    pub val: Vec<SceneBundle>,
    pub test: Vec<SceneBundle>,
}

fn take_ids(pool: &mut Vec<SceneBundle>, ids: &[String]) -> Result<Vec<SceneBundle>> {
    ids.iter()
        .map(|id| {
            let pos = pool
                .iter()
                .position(|s| &s.id == id)
                .ok_or_else(|| Error::Config(format!("scene id `{id}` not found or used twice")))?;
            Ok(pool.remove(pos))
        })
        .collect()
}

/// Moves the scenes at `idx` out of `pool`, preserving their order.
fn take_indices(pool: &mut Vec<SceneBundle>, idx: &[usize]) -> Vec<SceneBundle> {
    let mut sorted = idx.to_vec();
    sorted.sort_unstable();
    let taken: Vec<SceneBundle> = sorted.iter().map(|&i| pool[i].clone()).collect();
    for &i in sorted.iter().rev() {
        pool.remove(i);
    }
    taken
}

/// Loads or generates scenes and splits off test, then validation scenes.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let mut pool = match &cfg.data_dir {
        Some(dir) => read_dataset(dir)?,
        None => generate_synthetic(&cfg.synthetic_config())?,
    };
    let split_seed = splitmix64(cfg.seed ^ fnv1a("split"));
    let test = if cfg.test_ids.is_empty() {
        let s = split_scenes(&pool, cfg.test_scenes, split_seed)?;
        take_indices(&mut pool, &s.val)
    } else {
        take_ids(&mut pool, &cfg.test_ids)?
    };
    let val = if cfg.val_ids.is_empty() {
        let s = split_scenes(&pool, cfg.val_scenes, splitmix64(split_seed))?;
        take_indices(&mut pool, &s.val)
    } else {
        take_ids(&mut pool, &cfg.val_ids)?
    };
    if pool.is_empty() {
        return Err(Error::Config("no training scenes left after the validation and test split".into()));
    }
    Ok(Dataset { train: pool, val, test })
}

pub fn prepare(scenes: &[SceneBundle], group: FeatureGroup, stats: &HashMap<String, ChannelStats>) -> Result<Vec<PreparedScene>> {
    scenes.iter().map(|s| PreparedScene::new(s, group, stats)).collect()
}

/// Training patches of every scene; each scene gets its own sampler stream.
pub fn sample_training_patches(scenes: &[SceneBundle], sampler: &SamplerConfig, seed: u64) -> Result<Vec<PatchRef>> {
    let mut out = Vec::new();
    for (i, s) in scenes.iter().enumerate() {
        let cfg = SamplerConfig { seed: splitmix64(seed ^ (i as u64 + 1)), ..sampler.clone() };
        out.extend(sample_patches(s, &cfg)?.patches.into_iter().map(|view| PatchRef { scene: i, view }));
    }
    if out.is_empty() {
        return Err(Error::Config("the sampler found no acceptable training patch".into()));
    }
    Ok(out)
}

/// Metadata stored next to a trained checkpoint: what is needed to rebuild its inputs.
pub fn checkpoint_metadata(group: FeatureGroup, seed: u64, stats: &HashMap<String, ChannelStats>) -> Map<String, Value> {
    let mut sorted: Vec<(&String, &ChannelStats)> = stats.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(b.0));
    let stats: Map<String, Value> =
        sorted.into_iter().map(|(k, v)| (k.clone(), serde_json::to_value(v).expect("stats serialize"))).collect();
    let mut m = Map::new();
    m.insert("group".into(), json!(group.to_string()));
    m.insert("seed".into(), json!(seed));
    m.insert("stats".into(), Value::Object(stats));
    m
}

/// Feature group and standardization statistics recorded by [`checkpoint_metadata`].
pub fn checkpoint_inputs(manifest: &Manifest, dir: &Path) -> Result<(FeatureGroup, HashMap<String, ChannelStats>)> {
    let bad = |msg: &str| Error::format(dir, msg.to_string());
    let group = manifest
        .metadata
        .get("group")
        .and_then(Value::as_str)
        .ok_or_else(|| bad("checkpoint metadata lacks `group`"))?
        .parse()?;
    let stats = manifest.metadata.get("stats").cloned().ok_or_else(|| bad("checkpoint metadata lacks `stats`"))?;
    let stats = serde_json::from_value(stats).map_err(|e| bad(&format!("bad `stats`: {e}")))?;
    Ok((group, stats))
}

pub fn build_spec(cfg: &ExperimentConfig, group: FeatureGroup, rates: AsppRates) -> Result<ModelSpec> {
    let mut spec = ModelSpec::from_preset(&cfg.model_preset, group.len(), rates)?;
    spec.input_size = cfg.sampler.patch_size;
    spec.validate()?;
    Ok(spec)
}

/// A trained network together with what produced it.
pub struct TrainedCell {
    pub net: MultiTaskNet<f32>,
    pub log: RunLog,
    pub stats: HashMap<String, ChannelStats>,
}

pub fn train_cell(cfg: &ExperimentConfig, data: &Dataset, group: FeatureGroup, rates: AsppRates, seed: u64) -> Result<TrainedCell> {
    let stats = dataset_stats(&data.train);
    let train = prepare(&data.train, group, &stats)?;
    let val = prepare(&data.val, group, &stats)?;
    let patches = sample_training_patches(&data.train, &cfg.sampler, seed)?;
    let mut net = MultiTaskNet::<f32>::build(&build_spec(cfg, group, rates)?, seed)?;
    let tc = TrainConfig { seed, ..cfg.train_config() };
    let outcome = train_loop(&mut net, &train, &patches, &val, &tc)?;
    Ok(TrainedCell { net, log: outcome.log, stats })
}

/// Pooled scores over all scenes plus each scene on its own.
pub fn score_scenes(
    net: &mut MultiTaskNet<f32>,
    scenes: &[PreparedScene],
    average: F1Average,
) -> Result<(ScoreReport, Vec<(String, ScoreReport)>)> {
    let mut pooled = ScoreAccumulator::default();
    let mut per_scene = Vec::with_capacity(scenes.len());
    for s in scenes {
        let pred = predict_scene(net, s)?;
        let p = [&pred[0][..], &pred[1], &pred[2]];
        let t = [&s.labels[0][..], &s.labels[1], &s.labels[2]];
        let mut one = ScoreAccumulator::default();
        one.add(p, t)?;
        pooled.add(p, t)?;
        per_scene.push((s.id.clone(), one.report(average)));
    }
    Ok((pooled.report(average), per_scene))
}

pub fn read_score(dir: &Path) -> Option<RepeatScore> {
    let text = fs::read_to_string(dir.join(SCORE_FILE)).ok()?;
    serde_json::from_str(&text).ok()
}

/// Trains, checkpoints and scores one cell × repeat, then reads the stored score back.
pub fn run_cell(cfg: &ExperimentConfig, data: &Dataset, group: FeatureGroup, rates: AsppRates, repeat: usize) -> Result<RepeatScore> {
    let seed = cell_seed(cfg.seed, group, rates, repeat);
    let dir = cell_dir(&cfg.out, group, rates, repeat);
    let start = Instant::now();
    let TrainedCell { mut net, log, stats } = train_cell(cfg, data, group, rates, seed)?;
    net.save(&dir.join(CHECKPOINT_DIR), checkpoint_metadata(group, seed, &stats))?;
    log.write_csv(&dir.join(RUNLOG_FILE))?;
    let test = prepare(&data.test, group, &stats)?;
    let (pooled, scenes) = score_scenes(&mut net, &test, cfg.f1)?;
    let score = RepeatScore {
        repeat,
        seed,
        pooled,
        scenes,
        best_epoch: log.best_epoch,
        epochs: log.epochs.len(),
        wall_seconds: start.elapsed().as_secs_f64(),
        finished_at: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
    };
    let path = dir.join(SCORE_FILE);
    let text = serde_json::to_string_pretty(&score).expect("score serializes");
    write_atomic(&path, (text + "\n").as_bytes())?;
    read_score(&dir).ok_or_else(|| Error::format(&path, "score did not read back"))
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub rows: Vec<ReportRow>,
    /// Cell × repeat runs trained in this invocation (0 when everything was already done).
    pub trained: usize,
    pub failures: usize,
    /// Runs left untrained because the run limit was reached; no report is written then.
    pub pending: usize,
}

/// Worker count from [`THREADS_ENV`], defaulting to 1.
pub fn worker_count() -> usize {
    std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse().ok()).filter(|&n| n > 0).unwrap_or(1)
}

/// Runs every missing cell × repeat, then writes `report.csv`, `scenes.csv` and `config.txt` under `cfg.out`.
///
/// With `limit`, at most that many runs are trained in this call, as if the process were killed afterwards.
pub fn run_grid_limited(cfg: &ExperimentConfig, limit: Option<usize>) -> Result<GridOutcome> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    write_atomic(&cfg.out.join("config.txt"), cfg.to_text().as_bytes())?;

    let mut groups = cfg.groups.clone();
    groups.sort();
    groups.dedup();
    let mut rates = cfg.rates.clone();
    rates.sort();
    rates.dedup();
    let jobs: Vec<(FeatureGroup, AsppRates, usize)> = groups
        .iter()
        .flat_map(|&g| rates.iter().flat_map(move |&r| (0..cfg.repeats()).map(move |k| (g, r, k))))
        .collect();
    let pending: Vec<usize> =
        (0..jobs.len()).filter(|&i| read_score(&cell_dir(&cfg.out, jobs[i].0, jobs[i].1, jobs[i].2)).is_none()).collect();
    let todo: Vec<usize> = pending.iter().copied().take(limit.unwrap_or(usize::MAX)).collect();

    let mut results: Vec<Option<RepeatOutcome>> = vec![None; jobs.len()];
    if !todo.is_empty() {
        let data = load_dataset(cfg)?;
        let next = AtomicUsize::new(0);
        let slots = Mutex::new(&mut results);
        let workers = worker_count().min(todo.len());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let t = next.fetch_add(1, Ordering::SeqCst);
                    let Some(&j) = todo.get(t) else { break };
                    let (g, r, k) = jobs[j];
                    log::info!("cell {g} {r} repeat {k}: training");
                    let outcome = match run_cell(cfg, &data, g, r, k) {
                        Ok(s) => RepeatOutcome::Done(Box::new(s)),
                        Err(e) => {
                            log::error!("cell {g} {r} repeat {k} failed: {e}");
                            RepeatOutcome::Failed { repeat: k, seed: cell_seed(cfg.seed, g, r, k), error: e.to_string() }
                        }
                    };
                    slots.lock().expect("result slots")[j] = Some(outcome);
                });
            }
        });
    }
    if todo.len() < pending.len() {
        let failures = results.iter().flatten().filter(|o| o.score().is_none()).count();
        return Ok(GridOutcome { rows: Vec::new(), trained: todo.len(), failures, pending: pending.len() - todo.len() });
    }

    let mut rows = Vec::new();
    let mut failures = 0;
    for (ci, chunk) in jobs.chunks(cfg.repeats()).enumerate() {
        let (g, r, _) = chunk[0];
        let mut repeats = Vec::with_capacity(chunk.len());
        let mut wall = 0.0;
        for (k, &(_, _, rep)) in chunk.iter().enumerate() {
            let j = ci * cfg.repeats() + k;
            let outcome = match results[j].take() {
                Some(o @ RepeatOutcome::Failed { .. }) => o,
                _ => match read_score(&cell_dir(&cfg.out, g, r, rep)) {
                    Some(s) => RepeatOutcome::Done(Box::new(s)),
                    None => RepeatOutcome::Failed { repeat: rep, seed: cell_seed(cfg.seed, g, r, rep), error: "missing score".into() },
                },
            };
            if let Some(s) = outcome.score() {
                wall += s.wall_seconds;
            }
            repeats.push(outcome);
        }
        let row = ReportRow { group: g, rates: r, repeats, wall_seconds: wall };
        failures += row.failures();
        rows.push(row);
    }
    write_report(&rows, &cfg.out.join("report.csv"))?;
    write_atomic(&cfg.out.join("scenes.csv"), render_scene_report(&rows).as_bytes())?;
    Ok(GridOutcome { rows, trained: todo.len(), failures, pending: 0 })
}

pub fn run_grid(cfg: &ExperimentConfig) -> Result<GridOutcome> {
    run_grid_limited(cfg, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_are_pure_and_distinct() {
        let a = cell_seed(7, FeatureGroup::G1, AsppRates::SMALL, 0);
        assert_eq!(a, cell_seed(7, FeatureGroup::G1, AsppRates::SMALL, 0));
        assert_ne!(a, cell_seed(7, FeatureGroup::G1, AsppRates::SMALL, 1));
        assert_ne!(a, cell_seed(7, FeatureGroup::G5, AsppRates::SMALL, 0));
        assert_ne!(a, cell_seed(8, FeatureGroup::G1, AsppRates::SMALL, 0));
    }

    #[test]
    fn cell_dirs_use_stable_keys() {
        let d = cell_dir(Path::new("out"), FeatureGroup::G5, AsppRates::SMALL, 1);
        assert_eq!(d, Path::new("out/cells/g5_6-12-18_r1"));
    }
}
