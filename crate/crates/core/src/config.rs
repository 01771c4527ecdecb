//! Run configuration: a TOML file of flat dotted keys plus `key=value`
//! overrides. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::DatasetSpec;
use crate::error::{Error, IoContext, Result};
use crate::evaluation::ThresholdRule;
use crate::losses::LossWeights;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub root: String,
    pub image_size: usize,
    pub channels: usize,
    pub n_healthy_b: usize,
    pub n_mixed_healthy_a: usize,
    pub n_mixed_anomalous_a: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub lesion_min: usize,
    pub lesion_max: usize,
    pub lesion_contrast: f64,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = DatasetSpec::default();
        Self {
            root: "data".into(),
            image_size: s.image_size,
            channels: s.channels,
            n_healthy_b: s.n_healthy_b,
            n_mixed_healthy_a: s.n_mixed_healthy_a,
            n_mixed_anomalous_a: s.n_mixed_anomalous_a,
            n_val: s.n_val,
            n_test: s.n_test,
            lesion_min: s.lesion_size_range.0,
            lesion_max: s.lesion_size_range.1,
            lesion_contrast: s.lesion_contrast,
            seed: s.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub width_scale: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { width_scale: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub total_iterations: u64,
    pub decay_iterations: u64,
    pub base_lr: f64,
    pub critic_steps_per_gen_step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub adv_on_b: bool,
    /// Checkpoint to continue from; empty for a fresh run.
    pub resume: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            total_iterations: t.total_iterations,
            decay_iterations: t.decay_iterations,
            base_lr: t.base_lr,
            critic_steps_per_gen_step: t.critic_steps_per_gen_step,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            seed: t.seed,
            checkpoint_every: t.checkpoint_every,
            adv_on_b: t.adv_on_b,
            resume: String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectSection {
    /// Directory holding `*.ckpt` files.
    pub checkpoints: String,
    /// Directory of real healthy images; empty uses the trainB split.
    pub reference: String,
    pub embedder_seed: u64,
    pub batch_size: usize,
}

impl Default for SelectSection {
    fn default() -> Self {
        Self {
            checkpoints: String::new(),
            reference: String::new(),
            embedder_seed: 0,
            batch_size: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub checkpoint: String,
    pub threshold_rule: ThresholdRule,
    pub heatmaps: bool,
    pub batch_size: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            checkpoint: String::new(),
            threshold_rule: ThresholdRule::F1,
            heatmaps: false,
            batch_size: 16,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreSection {
    pub checkpoint: String,
    pub image: String,
    /// Heatmap output path; empty writes none.
    pub heatmap: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Parent of per-run output directories.
    pub out_root: String,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            out_root: "runs".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub loss: LossWeights,
    pub select: SelectSection,
    pub eval: EvalSection,
    pub score: ScoreSection,
    pub run: RunSection,
}

/// Reasons a configuration cannot be assembled; all are usage errors.
#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    UnknownKey(String),
    BadValue { key: String, msg: String },
    BadOverride(String),
    MissingKey(String),
    File { path: PathBuf, msg: String },
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::UnknownKey(k) => write!(f, "unknown config key `{k}`"),
            Self::BadValue { key, msg } => write!(f, "bad value for `{key}`: {msg}"),
            Self::BadOverride(s) => write!(f, "override `{s}` is not of the form key=value"),
            Self::MissingKey(k) => write!(f, "missing required key `{k}`"),
            Self::File { path, msg } => write!(f, "cannot read config {}: {msg}", path.display()),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Flattens nested tables into `a.b.c` keys.
pub fn flatten(table: &toml::Table) -> BTreeMap<String, toml::Value> {
    fn walk(prefix: &str, t: &toml::Table, out: &mut BTreeMap<String, toml::Value>) {
        for (k, v) in t {
            let key = if prefix.is_empty() {
                k.clone()
            } else {
                format!("{prefix}.{k}")
            };
            match v {
                toml::Value::Table(inner) => walk(&key, inner, out),
                other => {
                    out.insert(key, other.clone());
                }
            }
        }
    }
    let mut out = BTreeMap::new();
    walk("", table, &mut out);
    out
}

fn known_keys() -> BTreeMap<String, toml::Value> {
    let t = toml::Table::try_from(Config::default()).expect("default config serialises");
    flatten(&t)
}

/// Parses an override value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn insert_dotted(t: &mut toml::Table, key: &str, v: toml::Value) {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().unwrap();
    let mut cur = t;
    for p in parts {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .expect("section is a table");
    }
    cur.insert(last.to_string(), v);
}

/// Builds a config from an optional file and `key=value` overrides, which win.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> std::result::Result<Config, ConfigError> {
    let known = known_keys();
    let mut flat = BTreeMap::new();
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).map_err(|e| ConfigError::File {
            path: p.to_path_buf(),
            msg: e.to_string(),
        })?;
        let t: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::File {
            path: p.to_path_buf(),
            msg: e.to_string(),
        })?;
        flat.extend(flatten(&t));
    }
    for o in overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::BadOverride(o.clone()))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(ConfigError::BadOverride(o.clone()));
        }
        flat.insert(k.to_string(), parse_value(v.trim()));
    }
    if let Some(k) = flat.keys().find(|k| !known.contains_key(*k)) {
        return Err(ConfigError::UnknownKey(k.clone()));
    }
    let mut table = toml::Table::new();
    for (k, v) in &flat {
        // integers are accepted where reals are expected, scalars where strings are
        let v = match (&known[k], v) {
            (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(*i as f64),
            (toml::Value::String(_), toml::Value::Integer(_) | toml::Value::Float(_) | toml::Value::Boolean(_)) => {
                toml::Value::String(v.to_string())
            }
            _ => v.clone(),
        };
        // deserialise the key alone so a type error can name it
        let mut single = toml::Table::new();
        insert_dotted(&mut single, k, v.clone());
        if let Err(e) = Config::deserialize(toml::Value::Table(single)) {
            return Err(ConfigError::BadValue {
                key: k.clone(),
                msg: e.message().to_string(),
            });
        }
        insert_dotted(&mut table, k, v);
    }
    Config::deserialize(toml::Value::Table(table)).map_err(|e| ConfigError::BadValue {
        key: String::from("(config)"),
        msg: e.message().to_string(),
    })
}

impl Config {
    pub fn dataset_spec(&self) -> DatasetSpec {
        let d = &self.data;
        DatasetSpec {
            image_size: d.image_size,
            channels: d.channels,
            n_healthy_b: d.n_healthy_b,
            n_mixed_healthy_a: d.n_mixed_healthy_a,
            n_mixed_anomalous_a: d.n_mixed_anomalous_a,
            n_val: d.n_val,
            n_test: d.n_test,
            lesion_size_range: (d.lesion_min, d.lesion_max),
            lesion_contrast: d.lesion_contrast,
            seed: d.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            image_size: self.data.image_size,
            channels: self.data.channels,
            width_scale: self.model.width_scale,
            batch_size: t.batch_size,
            total_iterations: t.total_iterations,
            decay_iterations: t.decay_iterations,
            base_lr: t.base_lr,
            critic_steps_per_gen_step: t.critic_steps_per_gen_step,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            weights: self.loss,
            adv_on_b: t.adv_on_b,
            seed: t.seed,
            checkpoint_every: t.checkpoint_every,
        }
    }

    /// Every key with its resolved value, one `key = value` line each, sorted.
    pub fn snapshot(&self) -> String {
        let t = toml::Table::try_from(self).expect("config serialises");
        flatten(&t)
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Short hex digest of the snapshot.
    pub fn hash(&self) -> String {
        let d = Sha256::digest(self.snapshot().as_bytes());
        d.iter().take(4).map(|b| format!("{b:02x}")).collect()
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).at(dir)?;
        let p = dir.join("config.resolved.toml");
        std::fs::write(&p, self.snapshot()).at(&p)?;
        Ok(p)
    }
}

/// `<out_root>/<command>-<UTC timestamp>-<config hash>`, made unique with a
/// numeric suffix if it already exists.
pub fn run_dir(cfg: &Config, command: &str) -> Result<PathBuf> {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = Path::new(&cfg.run.out_root).join(format!("{command}-{stamp}-{}", cfg.hash()));
    let mut dir = base.clone();
    let mut k = 1;
    while dir.exists() {
        dir = PathBuf::from(format!("{}-{k}", base.display()));
        k += 1;
    }
    std::fs::create_dir_all(&dir).at(&dir)?;
    Ok(dir)
}

/// Reads a config back from its snapshot.
pub fn load_snapshot(path: &Path) -> std::result::Result<Config, ConfigError> {
    load_config(Some(path), &[])
}

impl From<ConfigError> for Error {
    fn from(e: ConfigError) -> Self {
        Error::Config(e.to_string())
    }
}
