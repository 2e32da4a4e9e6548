//! Run configuration: a TOML document whose sections mirror the core configs.
//! Flags override file values; one seed drives every random stream.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fakescope_core::data::{EpochSpec, PreprocessConfig, SplitRule, NATURAL_IMAGE_MEANS, NATURAL_IMAGE_STDS};
use fakescope_core::models::{BackboneId, FreqBranchConfig, ModelConfig};
use fakescope_core::training::{AmpConfig, OptimizerConfig, SchedulerConfig, TrainConfig};
use serde::{Deserialize, Serialize};

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Plain,
    Hybrid,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub split: SplitRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessSection {
    /// Square input side; the backbone's native resolution when absent.
    pub target_size: Option<u32>,
    pub flip_probability: f64,
    pub channel_means: [f32; 3],
    pub channel_stds: [f32; 3],
}

impl Default for PreprocessSection {
    fn default() -> Self {
        Self {
            target_size: None,
            flip_probability: 0.5,
            channel_means: NATURAL_IMAGE_MEANS,
            channel_stds: NATURAL_IMAGE_STDS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub backbone: BackboneId,
    pub dropout_rate: Option<f64>,
    pub pretrained: Option<bool>,
    pub pretrained_path: Option<PathBuf>,
    pub freq_feature_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: ModelKind::Plain,
            backbone: BackboneId::B6,
            dropout_rate: None,
            pretrained: None,
            pretrained_path: None,
            freq_feature_dim: FreqBranchConfig::default().feature_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub epochs: u64,
    pub threshold: f64,
    /// Batch size for validation and evaluation passes.
    pub eval_batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 30,
            threshold: 0.5,
            eval_batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchSection {
    pub n_files: usize,
    pub batch_size: usize,
    pub warmup_batches: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            n_files: 3072,
            batch_size: 32,
            warmup_batches: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub format_version: u32,
    pub seed: u64,
    pub data: DataSection,
    pub epoch: EpochSpec,
    pub preprocess: PreprocessSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub optimizer: OptimizerConfig,
    pub scheduler: SchedulerConfig,
    pub amp: AmpConfig,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            format_version: CONFIG_FORMAT_VERSION,
            seed: 0,
            data: DataSection::default(),
            epoch: EpochSpec::default(),
            preprocess: PreprocessSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            optimizer: OptimizerConfig::default(),
            scheduler: SchedulerConfig::default(),
            amp: AmpConfig::default(),
            bench: BenchSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        anyhow::ensure!(
            cfg.format_version == CONFIG_FORMAT_VERSION,
            "config {} has format_version {}, expected {CONFIG_FORMAT_VERSION}",
            path.display(),
            cfg.format_version
        );
        Ok(cfg)
    }

    /// Pushes the run seed into every seeded component and fills defaults
    /// that depend on other fields.
    pub fn resolve(&mut self) {
        self.epoch.seed = self.seed;
        if let SplitRule::Stratified { seed, .. } = &mut self.data.split {
            *seed = self.seed;
        }
        if self.preprocess.target_size.is_none() {
            self.preprocess.target_size = Some(self.model.backbone.resolution());
        }
        if self.model.dropout_rate.is_none() {
            self.model.dropout_rate = Some(self.model.backbone.default_dropout());
        }
        if self.model.pretrained.is_none() {
            self.model.pretrained = Some(self.model.backbone != BackboneId::TinyTest);
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn preprocess(&self) -> PreprocessConfig {
        PreprocessConfig {
            target_size: self
                .preprocess
                .target_size
                .unwrap_or_else(|| self.model.backbone.resolution()),
            flip_probability: self.preprocess.flip_probability,
            channel_means: self.preprocess.channel_means,
            channel_stds: self.preprocess.channel_stds,
        }
    }

    pub fn model(&self) -> ModelConfig {
        let m = &self.model;
        let mut cfg = ModelConfig::new(m.backbone).with_seeds(self.seed, self.seed);
        if let Some(d) = m.dropout_rate {
            cfg.dropout_rate = d;
        }
        if let Some(p) = m.pretrained {
            cfg.pretrained = p;
        }
        cfg.pretrained_path = m.pretrained_path.clone();
        if m.kind == ModelKind::Hybrid {
            cfg = cfg.with_freq_branch(m.freq_feature_dim);
        }
        cfg
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            seed: self.seed,
            optimizer: self.optimizer.clone(),
            scheduler: self.scheduler.clone(),
            amp: self.amp.clone(),
            threshold: self.train.threshold,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_config_round_trips_through_toml() {
        let mut cfg = RunConfig {
            seed: 42,
            ..Default::default()
        };
        cfg.model.kind = ModelKind::Hybrid;
        cfg.model.backbone = BackboneId::TinyTest;
        cfg.resolve();
        let text = cfg.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.epoch.seed, 42);
        assert_eq!(back.preprocess.target_size, Some(64));
        assert!(back.model().is_hybrid());
        assert!(!back.model().pretrained);
    }

    #[test]
    fn sections_are_optional() {
        let cfg: RunConfig = toml::from_str("[epoch]\nbatch_size = 8\n").unwrap();
        assert_eq!(cfg.epoch.batch_size, 8);
        assert_eq!(cfg.epoch.images_per_epoch, 25_600);
        assert_eq!(cfg.optimizer.initial_lr, 5e-4);
        assert_eq!(cfg.preprocess().target_size, 528);
    }

    #[test]
    fn unknown_backbone_lists_the_choices() {
        let err = toml::from_str::<RunConfig>("[model]\nbackbone = \"b7\"\n").unwrap_err();
        assert!(err.to_string().contains("b6"), "{err}");
    }
}
