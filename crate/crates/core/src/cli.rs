//! Command-line entry point: `onedir <command> [--config FILE] [key=value ...]`.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::batch::ImageBatch;
use crate::composition::{compose_healthy, difference_map, write_heatmap};
use crate::config::{load_config, run_dir, Config, ConfigError};
use crate::datasets::{generate_synthetic_benchmark, load_image, load_split, ImageSet, SampleRecord, Split};
use crate::error::{Error, IoContext};
use crate::evaluation::{anomaly_score, evaluate_generator, write_report, write_scores_csv, EvalOptions};
use crate::selection::{select_best_checkpoint, write_selection_csv, RandomConvEmbedder};
use crate::trainer::{load_generator, run_training, TrainPaths};

/// Environment variable naming the compute device.
pub const DEVICE_ENV: &str = "ONEDIR_DEVICE";

#[derive(Parser, Debug)]
#[command(name = "onedir", about = "Unpaired healthy-image translation for anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML file of dotted keys.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// `key=value` overrides, applied after the file.
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic benchmark to `data.root`.
    SynthData(Common),
    /// Train on `data.root`.
    Train(Common),
    /// Pick the checkpoint in `select.checkpoints` with the lowest FID.
    Select(Common),
    /// Evaluate `eval.checkpoint` on the val and test splits.
    Evaluate(Common),
    /// Score `score.image` with `score.checkpoint`.
    Score(Common),
}

impl Command {
    /// Section that bare `key=value` overrides belong to.
    fn section(&self) -> &'static str {
        match self {
            Command::SynthData(_) => "data",
            Command::Train(_) => "train",
            Command::Select(_) => "select",
            Command::Evaluate(_) => "eval",
            Command::Score(_) => "score",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::SynthData(c)
            | Command::Train(c)
            | Command::Select(c)
            | Command::Evaluate(c)
            | Command::Score(c) => c,
        }
    }
}

/// Failure of a command, mapped to an exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

fn required<'a>(value: &'a str, key: &str) -> Result<&'a str, CliError> {
    if value.is_empty() {
        Err(ConfigError::MissingKey(key.to_string()).into())
    } else {
        Ok(value)
    }
}

fn existing(value: &str, key: &str) -> Result<PathBuf, CliError> {
    let p = PathBuf::from(required(value, key)?);
    if !p.exists() {
        return Err(CliError::Usage(format!("`{key}` points to missing file {}", p.display())));
    }
    Ok(p)
}

fn check_device() -> Result<(), CliError> {
    match std::env::var(DEVICE_ENV) {
        Ok(d) if !d.is_empty() && d != "cpu" => Err(CliError::Usage(format!(
            "{DEVICE_ENV}={d} is not available; only `cpu` is supported"
        ))),
        _ => Ok(()),
    }
}

/// Parses `argv` (including the program name), runs the command, and returns
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: &Command) -> Result<(), CliError> {
    check_device()?;
    let common = cmd.common();
    let overrides = qualify_overrides(&common.overrides, cmd.section());
    let cfg = load_config(common.config.as_deref(), &overrides)?;
    match cmd {
        Command::SynthData(_) => synth_data(&cfg),
        Command::Train(_) => train(&cfg),
        Command::Select(_) => select(&cfg),
        Command::Evaluate(_) => evaluate(&cfg),
        Command::Score(_) => score(&cfg),
    }
    .map(|dir| {
        if let Some(dir) = dir {
            println!("{}", dir.display());
        }
    })
}

/// Prefixes undotted override keys with `section`, so `train seed=5` means
/// `train.seed=5`.
pub fn qualify_overrides(overrides: &[String], section: &str) -> Vec<String> {
    overrides
        .iter()
        .map(|o| match o.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() && !k.contains('.') => format!("{section}.{}={v}", k.trim()),
            _ => o.clone(),
        })
        .collect()
}

fn prepare(cfg: &Config, command: &str) -> Result<PathBuf, CliError> {
    let dir = run_dir(cfg, command)?;
    cfg.write_snapshot(&dir)?;
    info!("{command}: writing to {}", dir.display());
    Ok(dir)
}

fn synth_data(cfg: &Config) -> Result<Option<PathBuf>, CliError> {
    let spec = cfg.dataset_spec();
    spec.validate()?;
    let root = PathBuf::from(required(&cfg.data.root, "data.root")?);
    generate_synthetic_benchmark(&spec, &root)?;
    cfg.write_snapshot(&root)?;
    Ok(Some(root))
}

fn train(cfg: &Config) -> Result<Option<PathBuf>, CliError> {
    let tc = cfg.train_config();
    tc.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let data_root = PathBuf::from(required(&cfg.data.root, "data.root")?);
    let resume = if cfg.train.resume.is_empty() {
        None
    } else {
        Some(existing(&cfg.train.resume, "train.resume")?)
    };
    let dir = prepare(cfg, "train")?;
    let run = run_training(
        &tc,
        &TrainPaths {
            data_root,
            out_dir: dir.clone(),
            resume,
        },
    )?;
    info!("final checkpoint {}", run.final_checkpoint.display());
    Ok(Some(dir))
}

/// `*.ckpt` files directly inside `dir`, sorted by name.
pub fn list_checkpoints(dir: &Path) -> crate::Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .at(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt") && !p.ends_with("nonfinite_snapshot.ckpt"))
        .collect();
    out.sort();
    Ok(out)
}

/// Images of a split with any labels and masks dropped.
fn unlabeled(root: &Path, split: Split) -> crate::Result<Vec<SampleRecord>> {
    Ok(load_split(root, split)?
        .into_iter()
        .map(|r| SampleRecord::unlabeled(r.path()))
        .collect())
}

fn select(cfg: &Config) -> Result<Option<PathBuf>, CliError> {
    let ckpt_dir = existing(&cfg.select.checkpoints, "select.checkpoints")?;
    let data_root = PathBuf::from(required(&cfg.data.root, "data.root")?);
    let checkpoints = list_checkpoints(&ckpt_dir)?;
    if checkpoints.is_empty() {
        return Err(CliError::Usage(format!("no .ckpt files in {}", ckpt_dir.display())));
    }
    let dir = prepare(cfg, "select")?;
    let (size, channels) = (cfg.data.image_size, cfg.data.channels);
    let inputs = ImageSet::load(unlabeled(&data_root, Split::Val)?, size, channels)?;
    let reference_records = if cfg.select.reference.is_empty() {
        unlabeled(&data_root, Split::TrainB)?
    } else {
        let p = existing(&cfg.select.reference, "select.reference")?;
        crate::datasets::list_images(&p)?
            .into_iter()
            .map(SampleRecord::unlabeled)
            .collect()
    };
    let reference = ImageSet::load(reference_records, size, channels)?;
    let extractor = RandomConvEmbedder::new(channels, cfg.select.embedder_seed);
    let sel = select_best_checkpoint(&checkpoints, &inputs, &reference, &extractor, cfg.select.batch_size)?;
    write_selection_csv(&sel, &dir.join("selection.csv"))?;
    let best = dir.join("selected.txt");
    std::fs::write(&best, format!("{}\n", sel.best().path.display())).at(&best)?;
    info!("selected {} (fid {:?})", sel.best().path.display(), sel.best().fid);
    Ok(Some(dir))
}

fn evaluate(cfg: &Config) -> Result<Option<PathBuf>, CliError> {
    let ckpt = existing(&cfg.eval.checkpoint, "eval.checkpoint")?;
    let data_root = PathBuf::from(required(&cfg.data.root, "data.root")?);
    let dir = prepare(cfg, "evaluate")?;
    let (generator, meta) = load_generator(&ckpt)?;
    if meta.image_size != cfg.data.image_size {
        return Err(CliError::Usage(format!(
            "checkpoint image_size {} does not match data.image_size {}",
            meta.image_size, cfg.data.image_size
        )));
    }
    let opts = EvalOptions {
        rule: cfg.eval.threshold_rule,
        batch_size: cfg.eval.batch_size,
        heatmap_dir: cfg.eval.heatmaps.then(|| dir.join("heatmaps")),
    };
    let (mut report, scored) = evaluate_generator(&generator, &data_root, cfg.data.image_size, &opts)?;
    report.checkpoint = Some(ckpt);
    write_report(&report, &dir.join("report.json"))?;
    write_scores_csv(&scored, &dir.join("scores.csv"))?;
    info!("test auc {:.4}, f1 {:.4}, dice {:?}", report.auc, report.f1, report.mean_dice);
    Ok(Some(dir))
}

fn score(cfg: &Config) -> Result<Option<PathBuf>, CliError> {
    let ckpt = existing(&cfg.score.checkpoint, "score.checkpoint")?;
    let image = existing(&cfg.score.image, "score.image")?;
    let (generator, meta) = load_generator(&ckpt)?;
    let x = load_image(&image, meta.image_size, meta.channels)?;
    let s = x.shape().to_vec();
    let x = ImageBatch::new(x.reshape(&[1, s[0], s[1], s[2]]).map_err(Error::from)?)?;
    let out = generator.forward(&x)?;
    let translated = compose_healthy(&x, &out.intermediate, &out.mask)?;
    let value = anomaly_score(&x, &translated)?;
    println!("{value}");
    if !cfg.score.heatmap.is_empty() {
        write_heatmap(&difference_map(&x, &translated)?, Path::new(&cfg.score.heatmap))?;
    }
    Ok(None)
}
