//! Run configuration read from a TOML file.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use formstruct::document::SynthConfig;
use formstruct::evaluation::{Task, DEFAULT_KS};
use formstruct::model::ModelConfig;
use formstruct::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::Invalid;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub evaluation: EvaluationSection,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

/// Exactly one source must be set.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub synthetic: Option<SyntheticSource>,
    /// FUNSD root holding `training_data/` and `testing_data/`.
    pub funsd: Option<PathBuf>,
    pub dump: Option<DumpSource>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSource {
    pub train_pages: usize,
    pub test_pages: usize,
    /// Pages generated for best-checkpoint selection; 0 disables it.
    pub valid_pages: usize,
    /// Generator settings; its `pages` field is ignored.
    pub generator: SynthConfig,
}

impl Default for SyntheticSource {
    fn default() -> Self {
        Self {
            train_pages: 60,
            test_pages: 20,
            valid_pages: 0,
            generator: SynthConfig::default(),
        }
    }
}

/// Canonical dumps written by `synthesize`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpSource {
    pub train: PathBuf,
    pub test: PathBuf,
    pub valid: Option<PathBuf>,
    /// Crop cache root with one subdirectory per split.
    pub crops: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub tasks: Vec<Task>,
    pub ks: Vec<usize>,
    /// Minimum parent score for an edge to enter a predicted tree.
    pub tree_threshold: Option<f64>,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            tasks: vec![Task::Reconstruction, Task::Detection],
            ks: DEFAULT_KS.to_vec(),
            tree_threshold: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Invalid(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Invalid(format!("config {}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Applies command-line overrides, fixes the training seed to the run
    /// seed, and checks every invariant before anything is built.
    pub fn finalize(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(o) = out {
            self.out_dir = o;
        }
        self.training.seed = self.seed;
        self.validate()?;
        self.model = self.model.validated().map_err(|e| Invalid(e.to_string()))?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        let sources = [d.synthetic.is_some(), d.funsd.is_some(), d.dump.is_some()];
        if sources.iter().filter(|&&s| s).count() != 1 {
            return Err(Invalid(
                "dataset section must set exactly one of synthetic, funsd or dump".into(),
            )
            .into());
        }
        if let Some(s) = &d.synthetic {
            if s.train_pages == 0 || s.test_pages == 0 {
                return Err(Invalid("synthetic train_pages and test_pages must be at least 1".into()).into());
            }
            s.generator.validate().map_err(|e| Invalid(e.to_string()))?;
        }
        if let Some(root) = &d.funsd {
            require_path(root, "dataset.funsd")?;
        }
        if let Some(dump) = &d.dump {
            require_path(&dump.train, "dataset.dump.train")?;
            require_path(&dump.test, "dataset.dump.test")?;
            if let Some(v) = &dump.valid {
                require_path(v, "dataset.dump.valid")?;
            }
            if let Some(c) = &dump.crops {
                require_path(c, "dataset.dump.crops")?;
            }
        }
        self.training.validate().map_err(|e| Invalid(e.to_string()))?;
        if self.evaluation.ks.is_empty() || self.evaluation.ks.contains(&0) {
            return Err(Invalid("evaluation.ks must be a non-empty list of positive integers".into()).into());
        }
        if self.evaluation.tasks.is_empty() {
            return Err(Invalid("evaluation.tasks must name at least one task".into()).into());
        }
        Ok(())
    }
}

fn require_path(path: &Path, field: &str) -> Result<()> {
    if !path.exists() {
        return Err(Invalid(format!("{field}: {} does not exist", path.display())).into());
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}
