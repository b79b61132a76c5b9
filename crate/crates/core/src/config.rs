//! Run configuration: a TOML file with nested sections, named presets for
//! the three benchmark profiles, validation and seed fan-out.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cluster::KMeansConfig;
use crate::data::{DatasetFormat, Mode};
use crate::oracle::OracleConfig;
use crate::sampler::SamplerConfig;
use crate::seed;
use crate::trainer::TrainConfig;

pub use crate::trainer::Variant;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config syntax: {0}")]
    Syntax(#[from] toml::de::Error),
    #[error("unknown preset {0:?} (expected banking, stackoverflow or mcid)")]
    UnknownPreset(String),
}

/// Hyperparameter profiles of the three benchmark datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Banking,
    #[serde(rename = "stackoverflow")]
    StackOverflow,
    Mcid,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Banking, Preset::StackOverflow, Preset::Mcid];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Banking => "banking",
            Preset::StackOverflow => "stackoverflow",
            Preset::Mcid => "mcid",
        }
    }

    /// `(p, m, T, epochs)`; K = 50, n_k = 2, k_n = 2 and MinPts = 4 are shared.
    fn profile(self) -> (f64, usize, usize, usize) {
        match self {
            Preset::Banking => (0.1, 5, 3, 10),
            Preset::StackOverflow => (0.05, 8, 2, 10),
            Preset::Mcid => (0.2, 5, 3, 20),
        }
    }

    /// Number of ground-truth intents, where the benchmark fixes it.
    pub fn intent_count(self) -> Option<usize> {
        match self {
            Preset::Banking => Some(77),
            Preset::StackOverflow => Some(20),
            Preset::Mcid => None,
        }
    }

    pub fn apply(self, config: &mut RunConfig) {
        let (p, m, t, epochs) = self.profile();
        config.sampler.k = 50;
        config.sampler.p = p;
        config.sampler.n_k = 2;
        config.sampler.m = m;
        config.sampler.min_pts = 4;
        config.train.k_n = 2;
        config.train.resample_period = t;
        config.train.epochs = epochs;
        config.k = self.intent_count().or(config.k);
        config.preset = Some(self);
    }
}

impl std::str::FromStr for Preset {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "banking" | "banking77" => Ok(Preset::Banking),
            "stackoverflow" | "stack_overflow" => Ok(Preset::StackOverflow),
            "mcid" | "m-cid" | "m_cid" => Ok(Preset::Mcid),
            _ => Err(ConfigError::UnknownPreset(s.to_string())),
        }
    }
}

/// Known class ratio profiles of the semi-supervised setting.
pub const KCR_PRESETS: [f64; 3] = [0.25, 0.5, 0.75];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub path: PathBuf,
    /// Inferred from the file extension when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub format: Option<DatasetFormat>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { path: PathBuf::new(), format: None }
    }
}

/// Where base embeddings come from. File matrices are aligned row-for-id
/// with their split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum EmbeddingSource {
    File {
        train: PathBuf,
        test: PathBuf,
    },
    Service {
        endpoint: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cache_path: Option<PathBuf>,
        #[serde(default = "default_embedding_key_env")]
        api_key_env: String,
        #[serde(default = "default_embedding_batch")]
        batch_size: usize,
        #[serde(default = "default_embedding_parallelism")]
        parallelism: usize,
    },
}

fn default_embedding_key_env() -> String {
    "LANID_EMBEDDING_API_KEY".into()
}

fn default_embedding_batch() -> usize {
    64
}

fn default_embedding_parallelism() -> usize {
    4
}

impl Default for EmbeddingSource {
    fn default() -> Self {
        EmbeddingSource::File { train: PathBuf::new(), test: PathBuf::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    pub dataset: DatasetConfig,
    pub embeddings: EmbeddingSource,
    /// L2-normalize base embeddings before any distance computation.
    pub normalize: bool,
    pub mode: Mode,
    /// Known class ratio, semi-supervised mode only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kcr: Option<f64>,
    /// Share of every known class placed in the labelled subset.
    pub labeled_fraction: f64,
    pub variant: Variant,
    /// Number of clusters; defaults to the number of distinct test labels.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    /// Candidate prompt template files; the built-in template when empty.
    pub templates: Vec<PathBuf>,
    pub sampler: SamplerConfig,
    pub oracle: OracleConfig,
    pub train: TrainConfig,
    pub cluster: KMeansConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: None,
            dataset: DatasetConfig::default(),
            embeddings: EmbeddingSource::default(),
            normalize: true,
            mode: Mode::Unsupervised,
            kcr: None,
            labeled_fraction: 0.1,
            variant: Variant::LanidBoth,
            k: None,
            master_seed: 0,
            output_dir: PathBuf::from("runs"),
            templates: Vec::new(),
            sampler: SamplerConfig::default(),
            oracle: OracleConfig::default(),
            train: TrainConfig::default(),
            cluster: KMeansConfig::default(),
        }
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(inner)), toml::Value::Table(over)) => merge(inner, over),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

impl RunConfig {
    pub fn from_preset(preset: Preset) -> Self {
        let mut config = Self::default();
        preset.apply(&mut config);
        config
    }

    /// Parse TOML. A top-level `preset` key seeds every field from that
    /// profile before the rest of the file is layered on top.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let file: toml::Table = text.parse()?;
        let base = match file.get("preset").and_then(toml::Value::as_str) {
            Some(name) => Self::from_preset(name.parse()?),
            None => Self::default(),
        };
        let mut merged = toml::Table::try_from(&base).expect("config serializes to a table");
        merge(&mut merged, file);
        Ok(toml::Value::Table(merged).try_into()?)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        let mut config = Self::from_toml_str(&text)?;
        config.resolve_paths(path.parent().unwrap_or(Path::new("")));
        Ok(config)
    }

    /// Make relative file paths relative to `dir` (the config file's
    /// directory).
    pub fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut self.dataset.path);
        match &mut self.embeddings {
            EmbeddingSource::File { train, test } => {
                fix(train);
                fix(test);
            }
            EmbeddingSource::Service { cache_path, .. } => {
                if let Some(p) = cache_path {
                    fix(p);
                }
            }
        }
        if let Some(p) = &mut self.oracle.cache_path {
            fix(p);
        }
        self.templates.iter_mut().for_each(fix);
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Copy with every module seed derived from `master_seed`.
    pub fn seeded(&self) -> Self {
        let mut out = self.clone();
        // 63 bits so the snapshot stays a valid TOML integer
        let derive = |tag| seed::derive(self.master_seed, tag) >> 1;
        out.sampler.seed = derive("sampler");
        out.oracle.seed = derive("oracle");
        out.train.seed = derive("train");
        out
    }

    pub fn kmeans_seed(&self) -> u64 {
        seed::derive(self.master_seed, "kmeans")
    }

    pub fn split_seed(&self) -> u64 {
        seed::derive(self.master_seed, "split")
    }

    /// Digest of the canonical JSON form.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

/// Every violated invariant as `field: rule`; empty iff the config is valid.
pub fn validate_config(config: &RunConfig) -> Vec<String> {
    let mut out = Vec::new();
    if config.dataset.path.as_os_str().is_empty() {
        out.push("dataset.path: required".to_string());
    } else if config.dataset.format.is_none() && DatasetFormat::from_path(&config.dataset.path).is_none() {
        out.push("dataset.format: cannot infer from extension, set tsv or jsonl".to_string());
    }
    match &config.embeddings {
        EmbeddingSource::File { train, test } => {
            if train.as_os_str().is_empty() {
                out.push("embeddings.train: required for the file source".to_string());
            }
            if test.as_os_str().is_empty() {
                out.push("embeddings.test: required for the file source".to_string());
            }
        }
        EmbeddingSource::Service { endpoint, batch_size, parallelism, .. } => {
            if endpoint.is_empty() {
                out.push("embeddings.endpoint: required for the service source".to_string());
            }
            if !(1..=2048).contains(batch_size) {
                out.push(format!("embeddings.batch_size: must lie in 1..=2048, got {batch_size}"));
            }
            if *parallelism == 0 {
                out.push("embeddings.parallelism: must be >= 1".to_string());
            }
        }
    }
    if config.master_seed > i64::MAX as u64 {
        out.push(format!("master_seed: must be < 2^63 to fit a TOML integer, got {}", config.master_seed));
    }
    match (config.mode, config.kcr) {
        (Mode::SemiSupervised, None) => out.push("kcr: required in semi_supervised mode".to_string()),
        (Mode::SemiSupervised, Some(kcr)) if !(kcr > 0.0 && kcr < 1.0) => {
            out.push(format!("kcr: must lie in (0, 1), got {kcr}"));
        }
        (Mode::Unsupervised, Some(_)) => out.push("kcr: only meaningful in semi_supervised mode".to_string()),
        _ => {}
    }
    if !(config.labeled_fraction > 0.0 && config.labeled_fraction <= 1.0) {
        out.push(format!("labeled_fraction: must lie in (0, 1], got {}", config.labeled_fraction));
    }
    if config.k == Some(0) {
        out.push("k: must be >= 1".to_string());
    }
    if config.cluster.max_iter == 0 {
        out.push("cluster.max_iter: must be >= 1".to_string());
    }
    if config.cluster.restarts == 0 {
        out.push("cluster.restarts: must be >= 1".to_string());
    }
    if !(config.cluster.tol >= 0.0) {
        out.push("cluster.tol: must be >= 0".to_string());
    }
    out.extend(config.sampler.violations().into_iter().map(|v| format!("sampler.{v}")));
    out.extend(config.oracle.violations());
    out.extend(config.train.violations().into_iter().map(|v| format!("train.{v}")));
    out
}
