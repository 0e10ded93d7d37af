use std::path::{Path, PathBuf};

use anyhow::Context;
use instsep_core::bsseval::EvalConfig;
use instsep_core::datapipe::AugmentConfig;
use instsep_core::dsp::FrameConfig;
use instsep_core::fixtures::fixture_frame_config;
use instsep_core::model::ModelConfig;
use instsep_core::separator::InferenceConfig;
use instsep_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::UsageError;

pub const EXPERIMENT_FILE: &str = "experiment.json";

/// Everything one experiment needs. Relative paths resolve against the
/// directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset_root: PathBuf,
    pub instrument: String,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub frame: FrameConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub inference: InferenceConfig,
    pub eval: EvalConfig,
    /// Length of the fixed validation chunks; defaults to the training chunk.
    pub validation_chunk_seconds: Option<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset_root: PathBuf::from("data"),
            instrument: "vocals".into(),
            output_dir: PathBuf::from("runs"),
            seed: 0,
            frame: FrameConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            augment: AugmentConfig::default(),
            inference: InferenceConfig::default(),
            eval: EvalConfig::default(),
            validation_chunk_seconds: None,
        }
    }
}

impl ExperimentConfig {
    /// Settings sized for the bundled synthetic fixtures.
    pub fn fixture(sample_rate: u32) -> Self {
        Self {
            frame: fixture_frame_config(sample_rate),
            model: ModelConfig::small(),
            train: TrainConfig {
                batch_size: 4,
                max_epochs: 20,
                patience_epochs: 5,
                steps_per_epoch: 25,
                ..TrainConfig::default()
            },
            augment: AugmentConfig {
                chunk_seconds: 2.0,
                ..AugmentConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: Self = serde_json::from_str(&text)
            .map_err(|e| UsageError(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.dataset_root = resolve(base, &cfg.dataset_root);
        cfg.output_dir = resolve(base, &cfg.output_dir);
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).with_context(|| format!("writing {}", path.display()))
    }

    /// `--seed` reaches every RNG consumer.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.augment.seed = seed;
    }

    pub fn set_alpha(&mut self, alpha: f64) {
        self.train.alpha = alpha;
        self.model.alpha = alpha;
    }

    pub fn validation_chunk(&self) -> f64 {
        self.validation_chunk_seconds.unwrap_or(self.augment.chunk_seconds)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.frame.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        self.inference.validate()?;
        self.eval.validate()?;
        if self.instrument.is_empty() {
            return Err(UsageError("instrument must not be empty".into()).into());
        }
        Ok(())
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    let joined = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    std::path::absolute(&joined).unwrap_or(joined)
}

/// The explicit config, else `experiment.json` in `fallback_dir`, else
/// defaults.
pub fn load_or_default(explicit: Option<&Path>, fallback_dir: Option<&Path>) -> anyhow::Result<ExperimentConfig> {
    if let Some(p) = explicit {
        return ExperimentConfig::load(p);
    }
    if let Some(dir) = fallback_dir {
        let p = dir.join(EXPERIMENT_FILE);
        if p.exists() {
            log::info!("using {}", p.display());
            return ExperimentConfig::load(&p);
        }
    }
    Ok(ExperimentConfig::default())
}
