//! TOML run configuration and per-stage config hashes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{FinetuneConfig, SplitMode, SyntaxConfig};
use crate::ingest::{DatasetManifest, WindowConfig, PIPELINE_RATE_HZ};
use crate::model::ModelConfig;
use crate::pretrain::PretrainConfig;
use crate::probe::ProbeConfig;
use crate::tokenizer::{TokenizerConfig, TokenizerKind};

pub const ENV_OUTPUT_DIR: &str = "BIOPM_OUTPUT_DIR";
pub const ENV_THREADS: &str = "BIOPM_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Five activities with distinct motif content.
    Activities,
    /// Three classes sharing motifs and differing only in their order.
    Ordering,
}

/// A generated dataset, so the pipeline can run without external files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSource {
    pub name: String,
    pub kind: SyntheticKind,
    pub subjects: usize,
    #[serde(default = "default_blocks")]
    pub blocks_per_class: usize,
    #[serde(default = "default_block_s")]
    pub block_s: f64,
    #[serde(default = "default_rate")]
    pub native_hz: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_blocks() -> usize {
    2
}
fn default_block_s() -> f64 {
    60.0
}
fn default_rate() -> f64 {
    PIPELINE_RATE_HZ
}

impl SyntheticSource {
    pub fn class_names(&self) -> Vec<String> {
        match self.kind {
            SyntheticKind::Activities => (0..5).map(|i| format!("activity_{i}")).collect(),
            SyntheticKind::Ordering => ["abc", "acb", "aabbcc"].map(String::from).to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub pipeline_rate_hz: f64,
    pub window: WindowConfig,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            pipeline_rate_hz: PIPELINE_RATE_HZ,
            window: WindowConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignalConfig {
    pub filter_order: usize,
    pub cutoff_hz: f64,
}

impl Default for SignalConfig {
    fn default() -> Self {
        Self {
            filter_order: 6,
            cutoff_hz: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// `None` picks LOSOCV for small cohorts and 5-fold otherwise.
    pub split: Option<SplitMode>,
    pub fractions: Vec<f64>,
    pub mask_rates: Vec<f64>,
    pub syntax: SyntaxConfig,
    pub finetune: FinetuneConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: None,
            fractions: vec![0.1, 0.25, 0.5, 0.75, 1.0],
            mask_rates: vec![0.25, 0.5, 0.75],
            syntax: SyntaxConfig::default(),
            finetune: FinetuneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub datasets: Vec<DatasetManifest>,
    pub synthetic: Vec<SyntheticSource>,
    /// Datasets feeding pretraining; empty means all of them.
    pub pretrain_datasets: Vec<String>,
    pub ingest: IngestConfig,
    pub signal: SignalConfig,
    pub tokenizer: TokenizerConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub probe: ProbeConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("biopm_out"),
            datasets: Vec::new(),
            synthetic: Vec::new(),
            pretrain_datasets: Vec::new(),
            ingest: IngestConfig::default(),
            signal: SignalConfig::default(),
            tokenizer: TokenizerConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            probe: ProbeConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Identity of one pretrained encoder variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModelVariant {
    pub tokenizer: TokenizerKind,
    pub mask_rate: f64,
}

impl ModelVariant {
    pub fn tag(&self) -> String {
        let tok = match self.tokenizer {
            TokenizerKind::MovementSegments => "segments",
            TokenizerKind::EqualChunks => "chunks",
        };
        format!("{tok}_r{:03}", (self.mask_rate * 100.0).round() as u32)
    }
}

fn hash_of<T: Serialize>(parts: &T) -> u64 {
    let json = serde_json::to_vec(parts).expect("config serializes");
    let d = Sha256::digest(&json);
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.propagate_seed();
        Ok(cfg)
    }

    /// Loads a file and applies the environment overrides. Relative dataset
    /// paths resolve against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for d in &mut cfg.datasets {
            if Path::new(&d.path).is_relative() {
                d.path = base.join(&d.path).to_string_lossy().into_owned();
            }
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        if let Ok(dir) = std::env::var(ENV_OUTPUT_DIR) {
            cfg.output_dir = PathBuf::from(dir);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// The top-level seed drives every stage.
    pub fn propagate_seed(&mut self) {
        self.pretrain.seed = self.seed;
        self.probe.seed = self.seed;
        self.eval.syntax.seed = self.seed;
        self.eval.finetune.seed = self.seed;
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.propagate_seed();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() && self.synthetic.is_empty() {
            return Err(Error::Config("no datasets configured".into()));
        }
        let mut names: Vec<&str> = self.dataset_names();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("dataset names must be unique".into()));
        }
        for n in &self.pretrain_datasets {
            if !names.contains(&n.as_str()) {
                return Err(Error::Config(format!("pretrain dataset {n} is not configured")));
            }
        }
        if (self.tokenizer.sample_rate_hz - self.ingest.pipeline_rate_hz).abs() > 1e-9
            || (self.tokenizer.window_duration_s - self.ingest.window.duration_s).abs() > 1e-9
        {
            return Err(Error::Config("tokenizer rate and window must match the ingest settings".into()));
        }
        self.model.validate()?;
        self.pretrain.validate()
    }

    /// Fails when a manifest path is missing.
    pub fn check_paths(&self) -> Result<()> {
        for d in &self.datasets {
            if !Path::new(&d.path).exists() {
                return Err(Error::Config(format!("dataset {} path {} does not exist", d.dataset_name, d.path)));
            }
        }
        Ok(())
    }

    pub fn dataset_names(&self) -> Vec<&str> {
        self.datasets
            .iter()
            .map(|d| d.dataset_name.as_str())
            .chain(self.synthetic.iter().map(|s| s.name.as_str()))
            .collect()
    }

    pub fn class_names(&self, dataset: &str) -> Option<Vec<String>> {
        self.datasets
            .iter()
            .find(|d| d.dataset_name == dataset)
            .map(|d| d.class_names.clone())
            .or_else(|| self.synthetic.iter().find(|s| s.name == dataset).map(|s| s.class_names()))
    }

    pub fn pretrain_sources(&self) -> Vec<&str> {
        if self.pretrain_datasets.is_empty() {
            self.dataset_names()
        } else {
            self.pretrain_datasets.iter().map(String::as_str).collect()
        }
    }

    pub fn ingest_hash(&self, dataset: &str) -> u64 {
        let manifest = self.datasets.iter().find(|d| d.dataset_name == dataset);
        let synth = self.synthetic.iter().find(|s| s.name == dataset);
        hash_of(&("ingest", manifest, synth, &self.ingest))
    }

    pub fn tokenize_hash(&self, dataset: &str, kind: TokenizerKind) -> u64 {
        hash_of(&("tokenize", self.ingest_hash(dataset), &self.signal, &self.tokenizer, kind))
    }

    pub fn pretrain_hash(&self, variant: ModelVariant) -> u64 {
        let upstream: Vec<u64> = self
            .pretrain_sources()
            .into_iter()
            .map(|d| self.tokenize_hash(d, variant.tokenizer))
            .collect();
        let pre = PretrainConfig {
            mask_rate: variant.mask_rate,
            ..self.pretrain.clone()
        };
        hash_of(&("pretrain", upstream, &self.model, pre))
    }

    pub fn embed_hash(&self, dataset: &str, variant: ModelVariant, no_gravity: bool, no_positional: bool) -> u64 {
        hash_of(&(
            "embed",
            self.tokenize_hash(dataset, variant.tokenizer),
            self.pretrain_hash(variant),
            no_gravity,
            no_positional,
        ))
    }

    /// Checkpoint identity for an untrained encoder used by the baseline.
    pub fn default_variant(&self) -> ModelVariant {
        ModelVariant {
            tokenizer: TokenizerKind::MovementSegments,
            mask_rate: self.pretrain.mask_rate,
        }
    }
}
