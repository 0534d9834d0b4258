use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ssm_core::config::TrainConfig;
use ssm_core::dataset::{read_dataset, read_dataset_with, write_dataset, ReadOptions, Split};
use ssm_core::detection::extract_detections;
use ssm_core::eval::{evaluate, write_report, EvalOptions};
use ssm_core::geometry::Frame;
use ssm_core::heads::predict_world;
use ssm_core::io::{read_json, read_particles, read_template_bundle, read_volume, write_particles, write_template_bundle};
use ssm_core::synth::{generate_dataset, SyntheticSpec};
use ssm_core::template::select_medoid;
use ssm_core::trainer::{fit, load_model, FitOptions};
use ssm_core::{Error, Result};

/// Multi-anatomy detection and shape-model correspondence prediction.
#[derive(Parser, Debug)]
#[command(name = "ssm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// Random seed; overrides the seed in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON configuration for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset from a spec file (defaults when omitted).
    Synth,
    /// Select per-anatomy medoid templates from a dataset's training split.
    Template {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train a model.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Template bundle; defaults to the one stored with the dataset.
        #[arg(long)]
        templates: Option<PathBuf>,
        /// Continue from the last checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Suppress per-epoch progress on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Print detected boxes for one volume as `k cx cy cz rx ry rz confidence`.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        /// Presence threshold; defaults to the training config's.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Map local particles to the world frame of an anatomy's template.
    Align {
        #[arg(long)]
        templates: PathBuf,
        #[arg(long)]
        anatomy: usize,
        #[arg(long)]
        particles: PathBuf,
    },
    /// Full inference and metric report on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        templates: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Also write per-case meshes with per-vertex surface distances.
        #[arg(long)]
        heatmaps: bool,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

fn require_out(common: &Common) -> std::result::Result<&Path, Failure> {
    common
        .out
        .as_deref()
        .ok_or_else(|| Failure::Usage("missing required flag --out".into()))
}

fn templates_for(data: &Path, explicit: Option<&Path>) -> Result<Vec<ssm_core::template::TemplateShape>> {
    let dir = explicit.map(Path::to_path_buf).unwrap_or_else(|| data.join("templates"));
    read_template_bundle(&dir)
}

fn write_text(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    let common = &cli.common;
    match cli.command {
        Command::Synth => {
            let out = require_out(common)?;
            let mut spec: SyntheticSpec = match &common.config {
                Some(p) => read_json(p)?,
                None => SyntheticSpec::default(),
            };
            if let Some(s) = common.seed {
                spec.seed = s;
            }
            let ds = generate_dataset(&spec)?;
            write_dataset(&ds, out)?;
            println!("wrote {} samples to {}", ds.samples.len(), out.display());
        }
        Command::Template { data } => {
            let out = require_out(common)?;
            let ds = read_dataset_with(
                &data,
                ReadOptions {
                    masks: true,
                    splits: Some(&[Split::Train]),
                },
            )?;
            let mut templates = Vec::with_capacity(ds.num_classes);
            for k in 0..ds.num_classes {
                let cohort: Vec<_> = ds.samples.iter().filter_map(|s| s.anatomy(k)).collect();
                let mut masks = Vec::with_capacity(cohort.len());
                for (s, a) in ds.samples.iter().filter(|s| s.anatomy(k).is_some()).zip(&cohort) {
                    masks.push(a.mask.as_ref().ok_or_else(|| {
                        Error::InvalidConfig(format!("sample {} has no mask for anatomy {k}", s.id))
                    })?);
                }
                let locals: Vec<_> = cohort.iter().map(|a| &a.local).collect();
                let worlds: Vec<_> = cohort.iter().map(|a| &a.world).collect();
                let (idx, t) = select_medoid(k, &masks, &locals, &worlds)?;
                println!("anatomy {k}: medoid {}", ds.samples.iter().filter(|s| s.anatomy(k).is_some()).nth(idx).map_or("?", |s| s.id.as_str()));
                templates.push(t);
            }
            write_template_bundle(out, &templates)?;
        }
        Command::Train {
            data,
            templates,
            resume,
            quiet,
        } => {
            let out = require_out(common)?;
            let mut config = match &common.config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = common.seed {
                config.seed = s;
            }
            let ds = read_dataset_with(
                &data,
                ReadOptions {
                    masks: false,
                    splits: Some(&[Split::Train, Split::Val]),
                },
            )?;
            if ds.num_classes != config.model.num_classes || ds.num_points != config.model.num_points {
                return Err(Error::ConfigMismatch(format!(
                    "dataset has K={} M={}, config has K={} M={}",
                    ds.num_classes, ds.num_points, config.model.num_classes, config.model.num_points
                ))
                .into());
            }
            let tpl = templates_for(&data, templates.as_deref())?;
            let trained = fit(
                &ds.split(Split::Train),
                &ds.split(Split::Val),
                &tpl,
                &config,
                &FitOptions {
                    out_dir: out.to_path_buf(),
                    resume,
                    verbose: !quiet,
                },
            )?;
            let s = &trained.summary;
            println!(
                "trained {} epochs; best epoch {}; forced_fallback {} skipped_absent {} detached_fallback {}",
                s.epochs_completed,
                s.best_epoch.map_or("none".to_string(), |e| e.to_string()),
                s.counters.forced_fallback,
                s.counters.skipped_absent,
                s.counters.detached_fallback
            );
        }
        Command::Detect {
            checkpoint,
            volume,
            threshold,
        } => {
            let (model, store, config, _) = load_model(&checkpoint)?;
            let vol = read_volume(&volume)?;
            let out = model.backbone.forward(&store, &vol)?;
            let thr = threshold.unwrap_or(config.presence_threshold);
            let mut text = String::new();
            for b in extract_detections(&out.maps, thr) {
                let [cx, cy, cz] = b.center;
                let [rx, ry, rz] = b.radii;
                writeln!(text, "{} {cx} {cy} {cz} {rx} {ry} {rz} {}", b.anatomy, b.confidence).unwrap();
            }
            write_text(common.out.as_deref(), &text)?;
        }
        Command::Align {
            templates,
            anatomy,
            particles,
        } => {
            let tpl = read_template_bundle(&templates)?;
            let t = tpl
                .get(anatomy)
                .ok_or_else(|| Error::ConfigMismatch(format!("no template for anatomy {anatomy}")))?;
            let local = read_particles(&particles, Frame::Local, anatomy)?;
            let (world, _) = predict_world(&local, t)?;
            match &common.out {
                Some(p) => write_particles(p, &world)?,
                None => print!("{}", ssm_core::io::format_particles(world.points())),
            }
        }
        Command::Eval {
            checkpoint,
            data,
            templates,
            split,
            heatmaps,
        } => {
            let out = require_out(common)?;
            let (model, store, config, _) = load_model(&checkpoint)?;
            let mut opts = match &common.config {
                Some(p) => read_json::<EvalOptions>(p)?,
                None => EvalOptions {
                    presence_threshold: config.presence_threshold,
                    ..EvalOptions::default()
                },
            };
            if let Some(s) = common.seed {
                opts.seed = s;
            }
            if heatmaps {
                opts.heatmap_dir = Some(out.join("heatmaps"));
            }
            let ds = read_dataset(&data)?;
            if ds.num_classes != model.config.num_classes {
                return Err(Error::ConfigMismatch(format!(
                    "dataset has {} anatomy classes, checkpoint has {}",
                    ds.num_classes, model.config.num_classes
                ))
                .into());
            }
            let tpl = templates_for(&data, templates.as_deref())?;
            let samples = match split {
                SplitArg::Train => ds.split(Split::Train),
                SplitArg::Val => ds.split(Split::Val),
                SplitArg::Test => ds.split(Split::Test),
                SplitArg::All => ds.samples.iter().collect(),
            };
            let report = evaluate(&model, &store, &samples, &tpl, &opts)?;
            write_report(&report, out)?;
            let a = &report.aggregate;
            println!(
                "n={} missed={} recall={} local_rmse={} world_rmse={} center_err={} radius_err={} s2s_mean={} s2s_max={}",
                a.count,
                report.missed_detections,
                report.recall,
                a.local_rmse,
                a.world_rmse,
                a.center_err,
                a.radius_err,
                a.s2s_mean,
                a.s2s_max
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
