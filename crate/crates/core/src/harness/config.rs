//! Flat `key = value` experiment configuration with dotted keys.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{ContextConfig, FeatureGroup, SamplerConfig, SyntheticConfig};
use crate::error::{Error, Result};
use crate::metrics::F1Average;
use crate::model::AsppRates;
use crate::training::TrainConfig;

/// Learning rate used for the full-scale preset when none is configured.
pub const PAPER_LR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub model_preset: String,
    /// Scene directory written by `gen`; `None` generates scenes in memory from `synthetic`.
    pub data_dir: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
    pub val_scenes: usize,
    pub test_scenes: usize,
    /// Explicit scene ids; they take precedence over the counts.
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
    /// `None` means the preset default (1e-5 for `paper`, 1e-3 otherwise).
    pub initial_lr: Option<f64>,
    pub groups: Vec<FeatureGroup>,
    pub rates: Vec<AsppRates>,
    pub f1: F1Average,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            model_preset: "mini".into(),
            data_dir: None,
            synthetic: SyntheticConfig::default(),
            val_scenes: 1,
            test_scenes: 2,
            val_ids: Vec::new(),
            test_ids: Vec::new(),
            sampler: SamplerConfig::default(),
            train: TrainConfig::desk(),
            initial_lr: None,
            groups: FeatureGroup::ALL.to_vec(),
            rates: vec![AsppRates::DESK_SMALL, AsppRates::DESK_MEDIUM, AsppRates::DESK_LARGE],
            f1: F1Average::Weighted,
        }
    }
}

fn cfg_err(key: &str, value: &str, why: impl std::fmt::Display) -> Error {
    Error::Config(format!("{key} = {value}: {why}"))
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| cfg_err(key, value, e))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let items: Vec<T> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(cfg_err(key, value, "empty list"));
    }
    Ok(items)
}

/// Rate lists: presets or `r1-r2-r3` triplets separated by `,` or `;`. A value made only
/// of integers separated by `,` (such as `6,12,18`) is one explicit triplet.
fn parse_rates(key: &str, value: &str) -> Result<Vec<AsppRates>> {
    let sep: &[char] = if value.contains(';') { &[';'] } else { &[','] };
    let items: Vec<&str> = value.split(sep).map(str::trim).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        return Err(cfg_err(key, value, "empty list"));
    }
    if sep == [','] && items.iter().all(|s| s.parse::<usize>().is_ok()) {
        return Ok(vec![parse(key, value)?]);
    }
    items.into_iter().map(|s| parse(key, s)).collect()
}

fn ids(value: &str) -> Vec<String> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Applies one setting. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "model.preset" => {
                if !["paper", "mini", "probe"].contains(&v) {
                    return Err(cfg_err(key, v, "expected paper, mini or probe"));
                }
                self.model_preset = v.to_string();
            }
            "data.dir" => self.data_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.val_scenes" => self.val_scenes = parse(key, v)?,
            "data.test_scenes" => self.test_scenes = parse(key, v)?,
            "data.val_ids" => self.val_ids = ids(v),
            "data.test_ids" => self.test_ids = ids(v),
            "synthetic.scenes" => self.synthetic.scenes = parse(key, v)?,
            "synthetic.height" => self.synthetic.height = parse(key, v)?,
            "synthetic.width" => self.synthetic.width = parse(key, v)?,
            "synthetic.region_scale" => self.synthetic.region_scale = parse(key, v)?,
            "synthetic.land_fraction" => self.synthetic.land_fraction = parse(key, v)?,
            "synthetic.speckle_looks" => self.synthetic.speckle_looks = parse(key, v)?,
            "synthetic.ambiguity" => self.synthetic.ambiguity = parse(key, v)?,
            "synthetic.context_diameter" => {
                let d: usize = parse(key, v)?;
                let squares = self.synthetic.context.as_ref().map(|c| c.squares);
                self.synthetic.context = (d > 0).then(|| {
                    let mut c = ContextConfig::around(d);
                    c.squares = squares.unwrap_or(c.squares);
                    c
                });
            }
            "synthetic.context_squares" => match self.synthetic.context.as_mut() {
                Some(c) => c.squares = parse(key, v)?,
                None => return Err(cfg_err(key, v, "set synthetic.context_diameter first")),
            },
            "sampler.patch_size" => self.sampler.patch_size = parse(key, v)?,
            "sampler.patches_per_scene" => self.sampler.patches_per_scene = parse(key, v)?,
            "sampler.max_masked_fraction" => self.sampler.max_masked_fraction = parse(key, v)?,
            "sampler.max_redraws" => self.sampler.max_redraws = parse(key, v)?,
            "train.max_epochs" => self.train.max_epochs = parse(key, v)?,
            "train.early_stop_patience" => self.train.early_stop_patience = parse(key, v)?,
            "train.initial_lr" => self.initial_lr = Some(parse(key, v)?),
            "train.plateau_factor" => self.train.plateau_factor = parse(key, v)?,
            "train.plateau_patience" => self.train.plateau_patience = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.steps_per_epoch" => self.train.steps_per_epoch = parse(key, v)?,
            "train.repeats" | "grid.repeats" => self.train.repeats = parse(key, v)?,
            "grid.groups" => self.groups = parse_list(key, v)?,
            "grid.rates" => self.rates = parse_rates(key, v)?,
            "eval.f1" => self.f1 = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v).map_err(|e| Error::Config(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides, e.g. from repeated `--set` flags.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Synthetic generator settings seeded from the master seed.
    pub fn synthetic_config(&self) -> SyntheticConfig {
        SyntheticConfig { seed: self.seed, ..self.synthetic.clone() }
    }

    /// Training settings with the learning rate resolved against the model preset.
    pub fn train_config(&self) -> TrainConfig {
        let default_lr = if self.model_preset == "paper" { PAPER_LR } else { TrainConfig::desk().initial_lr };
        TrainConfig {
            initial_lr: self.initial_lr.unwrap_or(default_lr),
            ..self.train.clone()
        }
    }

    pub fn repeats(&self) -> usize {
        self.train.repeats
    }

    pub fn grid_size(&self) -> usize {
        self.groups.len() * self.rates.len() * self.repeats()
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() || self.rates.is_empty() {
            return Err(Error::Config("grid.groups and grid.rates must be non-empty".into()));
        }
        if self.data_dir.is_none() {
            self.synthetic.validate()?;
        }
        self.sampler.validate()?;
        self.train_config().validate()?;
        Ok(())
    }

    /// Canonical text form; parsing it back yields an equal config.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let s = &self.synthetic;
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("seed", self.seed.to_string());
        put("out", self.out.display().to_string());
        put("model.preset", self.model_preset.clone());
        put("data.dir", self.data_dir.as_ref().map(|d| d.display().to_string()).unwrap_or_default());
        put("data.val_scenes", self.val_scenes.to_string());
        put("data.test_scenes", self.test_scenes.to_string());
        put("data.val_ids", self.val_ids.join(","));
        put("data.test_ids", self.test_ids.join(","));
        put("synthetic.scenes", s.scenes.to_string());
        put("synthetic.height", s.height.to_string());
        put("synthetic.width", s.width.to_string());
        put("synthetic.region_scale", s.region_scale.to_string());
        put("synthetic.land_fraction", s.land_fraction.to_string());
        put("synthetic.speckle_looks", s.speckle_looks.to_string());
        put("synthetic.ambiguity", s.ambiguity.to_string());
        put("synthetic.context_diameter", s.context.as_ref().map_or(0, |c| c.diameter).to_string());
        if let Some(c) = &s.context {
            put("synthetic.context_squares", c.squares.to_string());
        }
        put("sampler.patch_size", self.sampler.patch_size.to_string());
        put("sampler.patches_per_scene", self.sampler.patches_per_scene.to_string());
        put("sampler.max_masked_fraction", self.sampler.max_masked_fraction.to_string());
        put("sampler.max_redraws", self.sampler.max_redraws.to_string());
        put("train.max_epochs", t.max_epochs.to_string());
        put("train.early_stop_patience", t.early_stop_patience.to_string());
        if let Some(lr) = self.initial_lr {
            put("train.initial_lr", lr.to_string());
        }
        put("train.plateau_factor", t.plateau_factor.to_string());
        put("train.plateau_patience", t.plateau_patience.to_string());
        put("train.batch_size", t.batch_size.to_string());
        put("train.steps_per_epoch", t.steps_per_epoch.to_string());
        put("train.repeats", t.repeats.to_string());
        put("grid.groups", join(&self.groups));
        put("grid.rates", join(&self.rates));
        put("eval.f1", self.f1.to_string());
        out
    }
}
