//! Command-line entry point.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ClassSpec, Settings};
use crate::error::{Error, Result};
use crate::evalx::{ablation_run, class_scores, metrics_tsv, AblationData};
use crate::fastcc::{self, CcBackend};
use crate::model::{load_checkpoint, save_checkpoint};
use crate::phantom::generate_phantom;
use crate::postproc::{detect, load_detections, save_detections, PostProcMethod};
use crate::trainer::{predict, train_with, ComponentSet, TrainConfig};
use crate::voldata::{
    load_annotations, load_volume, save_annotations, save_raw_channels, save_volume, ClassCatalog, ParticleLabel,
    VolumeFormat,
};

#[derive(Debug, Parser)]
#[command(name = "tomopick", version, about = "Few-shot particle picking in cryo-ET tomograms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Settings file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a setting, e.g. `--set train.lr=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a phantom tomogram with its particle table.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model from a tomogram and a few labeled particles.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Components to enable, e.g. `SSP,VI,CG`; empty for the baseline.
        #[arg(long)]
        components: Option<String>,
        /// Labels per class to train on.
        #[arg(long)]
        shots: Option<usize>,
    },
    /// Predict probabilities and particle detections for a tomogram.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        /// `cc3d` or `meanshift`.
        #[arg(long)]
        postproc: Option<PostProcMethod>,
        /// `reference` or `fastcc`.
        #[arg(long)]
        backend: Option<CcBackend>,
    },
    /// Score detections against ground-truth particles.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        labels: PathBuf,
    },
    /// Train all component subsets on phantoms and attribute F1 with Shapley values.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Label 26-connected components of a binary volume read from stdin.
    #[command(hide = true)]
    Cc26,
}

#[derive(Debug, Serialize, Deserialize)]
struct RunManifest {
    command: String,
    tool_version: String,
    seed: u64,
    config: serde_json::Value,
    inputs: BTreeMap<String, PathBuf>,
    artifacts: Vec<PathBuf>,
    started_unix_s: u64,
    wall_ms: u64,
}

struct Run {
    manifest: RunManifest,
    started: Instant,
    out: PathBuf,
}

impl Run {
    fn new(command: &str, settings: &Settings, out: &Path) -> Result<Self> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        Ok(Self {
            manifest: RunManifest {
                command: command.to_string(),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                seed: settings.train.seed,
                config: serde_json::to_value(settings).expect("settings serialize"),
                inputs: BTreeMap::new(),
                artifacts: Vec::new(),
                started_unix_s: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
                wall_ms: 0,
            },
            started: Instant::now(),
            out: out.to_path_buf(),
        })
    }

    fn input(&mut self, name: &str, path: &Path) {
        self.manifest.inputs.insert(name.to_string(), path.to_path_buf());
    }

    fn artifact(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.manifest.artifacts.push(p.clone());
        p
    }

    fn finish(mut self) -> Result<()> {
        self.manifest.wall_ms = self.started.elapsed().as_millis() as u64;
        let p = self.out.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses arguments, runs the subcommand and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate { common } => simulate(&common),
        Command::Train {
            common,
            volume,
            labels,
            components,
            shots,
        } => {
            let mut overrides = common.overrides.clone();
            if let Some(c) = components {
                overrides.push(format!("train.components={c}"));
            }
            if let Some(n) = shots {
                overrides.push(format!("train.shots={n}"));
            }
            let settings = Settings::load(common.config.as_deref(), &overrides)?;
            train_cmd(&settings, &common.out, &volume, &labels)
        }
        Command::Predict {
            common,
            checkpoint,
            volume,
            postproc,
            backend,
        } => {
            let mut settings = Settings::load(common.config.as_deref(), &common.overrides)?;
            if let Some(m) = postproc {
                settings.postproc.method = m;
            }
            if let Some(b) = backend {
                settings.postproc.backend = b;
            }
            predict_cmd(&settings, &common.out, &checkpoint, &volume)
        }
        Command::Evaluate {
            common,
            detections,
            labels,
        } => {
            let settings = Settings::load(common.config.as_deref(), &common.overrides)?;
            evaluate_cmd(&settings, &common.out, &detections, &labels)
        }
        Command::Ablate { common } => {
            let settings = Settings::load(common.config.as_deref(), &common.overrides)?;
            ablate_cmd(&settings, &common.out)
        }
        Command::Cc26 => {
            let stdin = std::io::stdin().lock();
            let stdout = std::io::stdout().lock();
            fastcc::serve(stdin, BufWriter::new(stdout))
        }
    }
}

fn simulate(common: &Common) -> Result<()> {
    let settings = Settings::load(common.config.as_deref(), &common.overrides)?;
    let mut run = Run::new("simulate", &settings, &common.out)?;
    run.manifest.seed = settings.phantom.seed;
    let cfg = settings.phantom_config(settings.phantom.seed)?;
    let (tomo, labels) = generate_phantom(&cfg)?;
    save_volume(&tomo, &run.artifact("volume.mrc"), VolumeFormat::Mrc)?;
    save_annotations(&run.artifact("labels.tsv"), &labels, &cfg.catalog)?;
    run.finish()
}

/// `n` labels per class, chosen by a seeded shuffle.
pub fn select_shots(labels: &[ParticleLabel], catalog: &ClassCatalog, n: usize, seed: u64) -> Vec<ParticleLabel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for e in catalog.entries() {
        let mut pool: Vec<ParticleLabel> = labels.iter().filter(|l| l.class_id == e.id).copied().collect();
        pool.shuffle(&mut rng);
        out.extend(pool.into_iter().take(n));
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointExtra {
    classes: Vec<ClassSpec>,
    train: TrainConfig,
    epoch: usize,
}

fn train_cmd(settings: &Settings, out: &Path, volume: &Path, labels_path: &Path) -> Result<()> {
    settings.check_training()?;
    let mut run = Run::new("train", settings, out)?;
    run.input("volume", volume);
    run.input("labels", labels_path);
    let catalog = settings.catalog()?;
    let tomo = load_volume(volume, VolumeFormat::from_path(volume))?;
    let all = load_annotations(labels_path, &catalog, Some(tomo.shape()))?;
    let labels = match settings.shots {
        Some(n) => select_shots(&all, &catalog, n, settings.train.seed),
        None => all,
    };
    let cfg = &settings.train;
    let report_path = run.artifact("report.jsonl");
    let mut report = BufWriter::new(File::create(&report_path).map_err(|e| Error::io(&report_path, e))?);
    let extra = |epoch: usize| {
        serde_json::to_value(CheckpointExtra {
            classes: settings.classes.clone(),
            train: cfg.clone(),
            epoch,
        })
        .expect("extra serializes")
    };
    let mut periodic = Vec::new();
    let (params, rep) = train_with(cfg, &tomo, &labels, &catalog, &mut |rec, p| {
        let line = serde_json::to_string(rec).expect("record serializes");
        writeln!(report, "{line}").map_err(|e| Error::io(&report_path, e))?;
        log::info!("{line}");
        if cfg.checkpoint_every > 0 && rec.epoch % cfg.checkpoint_every == 0 && rec.epoch < cfg.total_epochs {
            let dir = out.join(format!("checkpoint-epoch{}", rec.epoch));
            save_checkpoint(&dir, p, rec.epoch as u64, extra(rec.epoch))?;
            periodic.push(dir);
        }
        Ok(())
    })?;
    report.flush().map_err(|e| Error::io(&report_path, e))?;
    run.manifest.artifacts.extend(periodic);
    let summary = serde_json::json!({
        "epochs": rep.epochs.len(),
        "supervised_batches_per_epoch": rep.supervised_batches_per_epoch,
        "ssl_batches_per_epoch": rep.ssl_batches_per_epoch,
        "optimizer_resets": rep.optimizer_resets,
        "training_labels": labels.len(),
        "wall_ms": rep.wall_ms,
    });
    write_file(&run.artifact("summary.json"), &serde_json::to_string_pretty(&summary).expect("json"))?;
    save_checkpoint(&run.artifact("checkpoint"), &params, cfg.total_epochs as u64, extra(cfg.total_epochs))?;
    run.finish()
}

fn predict_cmd(settings: &Settings, out: &Path, checkpoint: &Path, volume: &Path) -> Result<()> {
    let mut run = Run::new("predict", settings, out)?;
    run.input("checkpoint", checkpoint);
    run.input("volume", volume);
    let ck = load_checkpoint(checkpoint)?;
    let extra: CheckpointExtra = serde_json::from_value(ck.extra.clone())
        .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    let catalog = ClassCatalog::new(extra.classes.iter().map(|c| (c.name.clone(), c.radius_vox)))?;
    run.manifest.seed = extra.train.seed;
    let tomo = load_volume(volume, VolumeFormat::from_path(volume))?;
    let probs = predict(&ck.params, &tomo, extra.train.subvolume, extra.train.stride)?;
    let dets = detect(&probs, &catalog, &settings.postproc)?;
    save_raw_channels(&probs, &run.artifact("probabilities.raw"))?;
    save_detections(&run.artifact("detections.tsv"), &dets, &catalog)?;
    run.finish()
}

fn evaluate_cmd(settings: &Settings, out: &Path, detections: &Path, labels: &Path) -> Result<()> {
    let mut run = Run::new("evaluate", settings, out)?;
    run.input("detections", detections);
    run.input("labels", labels);
    let catalog = settings.catalog()?;
    let dets = load_detections(detections, &catalog)?;
    let gt = load_annotations(labels, &catalog, None)?;
    let (overall, per_class) = class_scores(&dets, &gt, &catalog, settings.tolerance);
    write_file(&run.artifact("metrics.tsv"), &metrics_tsv(&overall, &per_class, &catalog))?;
    run.finish()
}

fn ablate_cmd(settings: &Settings, out: &Path) -> Result<()> {
    settings.check_training()?;
    let mut run = Run::new("ablate", settings, out)?;
    let catalog = settings.catalog()?;
    let (tomo, all) = generate_phantom(&settings.phantom_config(settings.phantom.seed)?)?;
    let heldout = vec![generate_phantom(&settings.phantom_config(settings.ablate.heldout_seed)?)?];
    let labels = match settings.shots {
        Some(n) => select_shots(&all, &catalog, n, settings.phantom.seed),
        None => all,
    };
    let data = AblationData {
        tomogram: &tomo,
        labels: &labels,
        heldout: &heldout,
        catalog: &catalog,
    };
    let subsets: Vec<ComponentSet> = settings.ablate.subsets.clone();
    let res = ablation_run(
        &settings.train,
        &data,
        &subsets,
        &settings.ablate.seeds,
        &settings.postproc,
        settings.tolerance,
    )?;
    write_file(&run.artifact("subsets.tsv"), &res.subsets_tsv())?;
    if let Some(sh) = &res.shapley {
        write_file(&run.artifact("shapley.tsv"), &sh.to_tsv())?;
    }
    run.finish()
}
