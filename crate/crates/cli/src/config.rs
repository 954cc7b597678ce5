use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use diffmae::evalmetrics::FinetuneConfig;
use diffmae::model::ModelConfig;
use diffmae::sampling::SamplerConfig;
use diffmae::training::TrainConfig;

/// Where images come from: a directory of PNGs, or the seeded synthetic set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Number of synthetic images when `image_dir` is unset.
    pub count: usize,
    pub seed: u64,
    #[serde(default)]
    pub image_dir: Option<PathBuf>,
}

/// Labeled synthetic split sizes for fine-tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledConfig {
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Write a checkpoint every this many steps (and always at the end).
    pub checkpoint_every: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub finetune: FinetuneConfig,
    pub data: DataConfig,
    pub labeled: LabeledConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            checkpoint_every: 500,
            model: ModelConfig::tiny(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            finetune: FinetuneConfig::default(),
            data: DataConfig { count: 256, seed: 0, image_dir: None },
            labeled: LabeledConfig { train_count: 64, test_count: 400, seed: 1 },
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| anyhow::anyhow!("invalid config: {}", e.message().trim()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.checkpoint_every == 0 {
            bail!("checkpoint_every must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::parse(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn shipped_tiny_config_is_valid() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml");
        let cfg = RunConfig::load(&path).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.model, ModelConfig::tiny());
        assert_eq!(RunConfig::parse(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn missing_and_unknown_keys_are_named() {
        let text = RunConfig::default().to_toml().unwrap();
        let missing = text.replace("patch_size = 8\n", "");
        let err = RunConfig::parse(&missing).unwrap_err().to_string();
        assert!(err.contains("patch_size"), "{err}");
        let extra = text.replace("patch_size = 8\n", "patch_size = 8\npatch_sise = 8\n");
        let err = RunConfig::parse(&extra).unwrap_err().to_string();
        assert!(err.contains("patch_sise"), "{err}");
    }
}
