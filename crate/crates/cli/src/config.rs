//! Run configuration: one TOML file, then command-line overrides on top.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use serde::{Deserialize, Serialize};

use rrb_core::experiment::{parse_pipelines, ModelOptions, Pipeline, Split, SuiteSpec, DEFAULT_PIPELINES};
use rrb_core::mpc::MpcConfig;
use rrb_core::train::TrainConfig;

/// Environment variable naming the default output directory.
pub const OUTPUT_ENV: &str = "RRB_OUTPUT_DIR";
pub const DEFAULT_OUTPUT: &str = "rrb-output";

/// Where scenarios come from. With `tracks` set, Interaction-format CSV files
/// are read against `map`; otherwise the synthetic dataset in `dir` (default
/// `<output_dir>/data`) is used.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dir: Option<PathBuf>,
    pub tracks: Vec<PathBuf>,
    pub map: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds the synthetic suite and training; `train.seed` is replaced by it.
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub suite: SuiteSpec,
    /// `random` or `scene-generalization[:<category>]`.
    pub split: String,
    /// Pipelines evaluated by `eval` and `predict`.
    pub pipelines: Vec<String>,
    /// Models trained by `train`; by default the ones the pipelines need.
    pub models: Option<Vec<String>>,
    pub model: ModelOptions,
    pub train: TrainConfig,
    pub mpc: MpcConfig,
    /// Worker threads for evaluation.
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: None,
            data: DataConfig::default(),
            suite: SuiteSpec::default(),
            split: "scene-generalization".into(),
            pipelines: DEFAULT_PIPELINES.iter().map(|s| s.to_string()).collect(),
            models: None,
            model: ModelOptions::default(),
            train: TrainConfig::default(),
            mpc: MpcConfig::default(),
            jobs: 1,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Output directory: config value, else `$RRB_OUTPUT_DIR`, else `rrb-output`.
    pub fn output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT))
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data.dir.clone().unwrap_or_else(|| self.output_dir().join("data"))
    }

    pub fn models_dir(&self) -> PathBuf {
        self.output_dir().join("models")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.output_dir().join("eval")
    }

    pub fn split(&self) -> Result<Split> {
        self.split.parse().context("split")
    }

    pub fn pipelines(&self) -> Result<Vec<Pipeline>> {
        if self.pipelines.is_empty() {
            bail!("pipelines: list at least one pipeline");
        }
        parse_pipelines(&self.pipelines).context("pipelines")
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Checks everything that can be checked without reading the dataset.
    pub fn validate(&self) -> Result<()> {
        self.split()?;
        self.pipelines()?;
        self.train.validate().context("train")?;
        self.mpc.validate().context("mpc")?;
        if self.jobs == 0 {
            bail!("jobs: must be >= 1");
        }
        if let Some(models) = &self.models {
            for m in models {
                self.model.spec_for_key(m).context("models")?;
            }
        }
        if !self.data.tracks.is_empty() {
            let Some(map) = &self.data.map else {
                bail!("data.map: track files need a map document");
            };
            for p in self.data.tracks.iter().chain([map]) {
                if !p.is_file() {
                    bail!("data: {} does not exist", p.display());
                }
            }
        } else if self.data.map.is_some() {
            bail!("data.map: set only together with data.tracks");
        }
        Ok(())
    }
}
