use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use aspp_scope::data::{generate_scene, padded_scene, MANIFEST, FeatureGroup, PreparedScene, SceneBundle};
use aspp_scope::gradcam::{compute_gradcam, export_heatmap, normalize, CamTarget, GradCamConfig, Heatmap, DEFAULT_LAYER};
use aspp_scope::harness::{self, ExperimentConfig};
use aspp_scope::metrics::F1Average;
use aspp_scope::model::{AsppRates, ModelSpec, MultiTaskNet, Task, INPUT_MULTIPLE};
use aspp_scope::rf::{render_rf_table, spec_rf_table};
use aspp_scope::{Error, Result};

#[derive(Parser)]
#[command(name = "aspp-scope", version, about = "Multi-task ASPP segmentation: data, training, grid, receptive fields, Grad-CAM")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Configuration override `key=value`; repeatable, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Master seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Verb {
    /// Generate a synthetic dataset from the `synthetic.*` settings.
    Gen {
        /// Dataset directory; one subdirectory per scene.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one grid cell and score it on the test scenes.
    Train {
        #[arg(long)]
        group: FeatureGroup,
        #[arg(long)]
        rates: AsppRates,
        #[arg(long, default_value_t = 0)]
        repeat: usize,
        /// Output directory (overrides `out`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on scenes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scene dataset directory; defaults to the configured test split.
        #[arg(long)]
        scenes: Option<PathBuf>,
        /// Expected feature group; must agree with the checkpoint.
        #[arg(long)]
        group: Option<FeatureGroup>,
        /// F1 averaging (overrides `eval.f1`).
        #[arg(long)]
        f1: Option<F1Average>,
    },
    /// Run the experiment grid and write the CSV report.
    Grid {
        #[arg(long, value_delimiter = ',')]
        groups: Option<Vec<FeatureGroup>>,
        /// Rate presets or r1-r2-r3 triplets, comma separated.
        #[arg(long, alias = "rates")]
        presets: Option<String>,
        #[arg(long)]
        repeats: Option<usize>,
        /// Output directory (overrides `out`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the receptive-field table of a model.
    Rf {
        /// Rate preset or triplet such as 6,12,18.
        #[arg(long, default_value = "small")]
        rates: String,
        /// Model preset: paper, mini or probe.
        #[arg(long, default_value = "paper")]
        preset: String,
    },
    /// Grad-CAM heatmap of one class for one scene.
    Gradcam {
        /// Scene directory.
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        task: Task,
        #[arg(long)]
        class: usize,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output path stem; `.raw`, `.pgm` and `.json` are appended.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = DEFAULT_LAYER)]
        layer: String,
        #[arg(long, default_value = "all")]
        target: CamTarget,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_overrides(&c.set)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn read_scenes(dir: &Path) -> Result<Vec<SceneBundle>> {
    if dir.join(MANIFEST).is_file() {
        Ok(vec![SceneBundle::read(dir)?])
    } else {
        aspp_scope::data::read_dataset(dir)
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.common)?;
    match cli.verb {
        Verb::Gen { out } => {
            let syn = cfg.synthetic_config();
            syn.validate()?;
            for i in 0..syn.scenes {
                let scene = generate_scene(&syn, i)?.bundle;
                scene.write(&out.join(&scene.id))?;
                println!("{}", scene.id);
            }
        }
        Verb::Train { group, rates, repeat, out } => {
            if let Some(o) = out {
                cfg.out = o;
            }
            cfg.validate()?;
            let data = harness::load_dataset(&cfg)?;
            let score = harness::run_cell(&cfg, &data, group, rates, repeat)?;
            let p = &score.pooled;
            println!(
                "group={group} rates={rates} repeat={repeat} seed={} sic_r2={:.2} sod_f1={:.2} floe_f1={:.2} combined={:.2} dir={}",
                score.seed,
                p.sic_r2,
                p.sod_f1,
                p.floe_f1,
                p.combined,
                harness::cell_dir(&cfg.out, group, rates, repeat).display()
            );
        }
        Verb::Eval { checkpoint, scenes, group, f1 } => {
            let (mut net, manifest) = MultiTaskNet::<f32>::load(&checkpoint)?;
            let (stored, stats) = harness::checkpoint_inputs(&manifest, &checkpoint)?;
            check_group(&net, stored, group, &checkpoint)?;
            let bundles = match scenes {
                Some(d) => read_scenes(&d)?,
                None => harness::load_dataset(&cfg)?.test,
            };
            let prepared = harness::prepare(&bundles, stored, &stats)?;
            let (pooled, per_scene) = harness::score_scenes(&mut net, &prepared, f1.unwrap_or(cfg.f1))?;
            for (id, s) in per_scene.iter().map(|(i, s)| (i.as_str(), s)).chain([("pooled", &pooled)]) {
                println!(
                    "scene={id} sic_r2={:.2} sod_f1={:.2} floe_f1={:.2} combined={:.2}",
                    s.sic_r2, s.sod_f1, s.floe_f1, s.combined
                );
            }
        }
        Verb::Grid { groups, presets, repeats, out } => {
            if let Some(g) = groups {
                cfg.groups = g;
            }
            if let Some(p) = presets {
                cfg.set("grid.rates", &p)?;
            }
            if let Some(r) = repeats {
                cfg.train.repeats = r;
            }
            if let Some(o) = out {
                cfg.out = o;
            }
            log::info!("grid of {} runs into {}", cfg.grid_size(), cfg.out.display());
            let outcome = harness::run_grid(&cfg)?;
            print!("{}", harness::render_report(&outcome.rows));
            eprintln!("ran {} runs ({} failed); report at {}", outcome.trained, outcome.failures, cfg.out.join("report.csv").display());
            if outcome.failures > 0 {
                return Err(Error::Config(format!("{} grid runs failed", outcome.failures)));
            }
        }
        Verb::Rf { rates, preset } => {
            let rates: AsppRates = rates.parse()?;
            let spec = ModelSpec::from_preset(&preset, 17, rates)?;
            print!("{}", render_rf_table(&spec_rf_table(&spec)?));
        }
        Verb::Gradcam { scene, task, class, checkpoint, out, layer, target } => {
            let (mut net, manifest) = MultiTaskNet::<f32>::load(&checkpoint)?;
            let (group, stats) = harness::checkpoint_inputs(&manifest, &checkpoint)?;
            let bundle = SceneBundle::read(&scene)?;
            let prepared = PreparedScene::new(&bundle, group, &stats)?;
            let batch = padded_scene(&prepared, INPUT_MULTIPLE)?;
            let [_, _, ph, pw] = batch.inputs.dims4()?;
            let valid: Vec<bool> = (0..ph * pw)
                .map(|i| {
                    let (y, x) = (i / pw, i % pw);
                    y < bundle.height && x < bundle.width && bundle.mask[y * bundle.width + x] == 0
                })
                .collect();
            let cam = GradCamConfig { task, class, layer, target };
            let mut hm = compute_gradcam(&mut net, &batch.inputs, Some(&valid), &cam, &bundle.id)?;
            crop(&mut hm, bundle.height, bundle.width);
            export_heatmap(&hm, &out)?;
            println!("heatmap={} height={} width={}", out.display(), hm.height, hm.width);
        }
    }
    Ok(())
}

fn check_group(net: &MultiTaskNet<f32>, stored: FeatureGroup, requested: Option<FeatureGroup>, dir: &Path) -> Result<()> {
    let Some(g) = requested else { return Ok(()) };
    let expected = net.spec().input_channels;
    if g.len() != expected || g != stored {
        return Err(Error::ChannelMismatch(format!(
            "checkpoint {} was trained on {stored} with {expected} input channels; {g} has {}",
            dir.display(),
            g.len()
        )));
    }
    Ok(())
}

/// Drops the bottom/right padding added for inference and rescales to the remaining maximum.
fn crop(hm: &mut Heatmap, h: usize, w: usize) {
    if hm.height == h && hm.width == w {
        return;
    }
    let pw = hm.width;
    let kept: Vec<f64> = (0..h).flat_map(|y| hm.values[y * pw..y * pw + w].iter().map(|&v| v as f64)).collect();
    hm.values = normalize(&kept);
    hm.height = h;
    hm.width = w;
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.common.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error kind={} message={msg:?}", e.kind());
            ExitCode::FAILURE
        }
    }
}
