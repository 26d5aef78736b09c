//! Grid report rows and their CSV rendering.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::FeatureGroup;
use crate::error::{Error, Result};
use crate::metrics::{combined_score, ScoreReport};
use crate::model::AsppRates;

pub const REPORT_HEADER: &str = "group,rates,repeat,sic_r2,sod_f1,floe_f1,combined";
pub const SCENE_HEADER: &str = "group,rates,repeat,scene,sic_r2,sod_f1,floe_f1,combined";

/// Scores of one trained repeat, as stored in the cell's `score.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatScore {
    pub repeat: usize,
    pub seed: u64,
    pub pooled: ScoreReport,
    pub scenes: Vec<(String, ScoreReport)>,
    pub best_epoch: Option<usize>,
    pub epochs: usize,
    pub wall_seconds: f64,
    /// Unix seconds at completion.
    pub finished_at: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RepeatOutcome {
    Done(Box<RepeatScore>),
    Failed { repeat: usize, seed: u64, error: String },
}

impl RepeatOutcome {
    pub fn repeat(&self) -> usize {
        match self {
            RepeatOutcome::Done(s) => s.repeat,
            RepeatOutcome::Failed { repeat, .. } => *repeat,
        }
    }

    pub fn score(&self) -> Option<&RepeatScore> {
        match self {
            RepeatOutcome::Done(s) => Some(s),
            RepeatOutcome::Failed { .. } => None,
        }
    }
}

/// Averaged sub-scores of the successful repeats of a cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Averaged {
    pub sic_r2: f64,
    pub sod_f1: f64,
    pub floe_f1: f64,
    pub combined: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub group: FeatureGroup,
    pub rates: AsppRates,
    pub repeats: Vec<RepeatOutcome>,
    pub wall_seconds: f64,
}

impl ReportRow {
    /// Arithmetic mean over successful repeats; `None` when every repeat failed.
    pub fn average(&self) -> Option<Averaged> {
        let done: Vec<&ScoreReport> = self.repeats.iter().filter_map(|r| r.score()).map(|s| &s.pooled).collect();
        if done.is_empty() {
            return None;
        }
        let n = done.len() as f64;
        let mean = |f: fn(&ScoreReport) -> f64| done.iter().map(|s| f(s)).sum::<f64>() / n;
        let (sic_r2, sod_f1, floe_f1) = (mean(|s| s.sic_r2), mean(|s| s.sod_f1), mean(|s| s.floe_f1));
        Some(Averaged {
            sic_r2,
            sod_f1,
            floe_f1,
            combined: combined_score(sic_r2, sod_f1, floe_f1),
        })
    }

    pub fn failures(&self) -> usize {
        self.repeats.iter().filter(|r| r.score().is_none()).count()
    }
}

fn fmt2(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.2}")
    }
}

fn score_cols(out: &mut String, s: [f64; 4]) {
    for v in s {
        out.push(',');
        out.push_str(&fmt2(v));
    }
    out.push('\n');
}

/// Per-repeat rows followed by an `avg` row for each cell; failed repeats read `nan`.
pub fn render_report(rows: &[ReportRow]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for row in rows {
        for r in &row.repeats {
            let _ = write!(out, "{},{},{}", row.group, row.rates, r.repeat());
            let s = r.score().map(|s| &s.pooled);
            score_cols(&mut out, s.map_or([f64::NAN; 4], |s| [s.sic_r2, s.sod_f1, s.floe_f1, s.combined]));
        }
        let _ = write!(out, "{},{},avg", row.group, row.rates);
        let a = row.average();
        score_cols(&mut out, a.map_or([f64::NAN; 4], |a| [a.sic_r2, a.sod_f1, a.floe_f1, a.combined]));
    }
    out
}

/// Scores of every test scene of every successful repeat.
pub fn render_scene_report(rows: &[ReportRow]) -> String {
    let mut out = format!("{SCENE_HEADER}\n");
    for row in rows {
        for s in row.repeats.iter().filter_map(|r| r.score()) {
            for (id, sc) in &s.scenes {
                let _ = write!(out, "{},{},{},{id}", row.group, row.rates, s.repeat);
                score_cols(&mut out, [sc.sic_r2, sc.sod_f1, sc.floe_f1, sc.combined]);
            }
        }
    }
    out
}

pub fn write_report(rows: &[ReportRow], path: &Path) -> Result<()> {
    write_atomic(path, render_report(rows).as_bytes())
}

/// Writes through a sibling temporary file and a rename, so readers never see partial files.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
