use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneId {
    B6,
    B3,
    B0,
    /// Four-layer CNN with 64 output features; never pretrained.
    TinyTest,
}

impl BackboneId {
    pub const ALL: [BackboneId; 4] = [BackboneId::B6, BackboneId::B3, BackboneId::B0, BackboneId::TinyTest];

    pub fn name(self) -> &'static str {
        match self {
            BackboneId::B6 => "b6",
            BackboneId::B3 => "b3",
            BackboneId::B0 => "b0",
            BackboneId::TinyTest => "tiny_test",
        }
    }

    /// Head dropout the backbone family was published with.
    pub fn default_dropout(self) -> f64 {
        match self {
            BackboneId::B6 => 0.5,
            BackboneId::B3 => 0.3,
            BackboneId::B0 => 0.2,
            BackboneId::TinyTest => 0.5,
        }
    }

    /// Native input resolution.
    pub fn resolution(self) -> u32 {
        match self {
            BackboneId::B6 => 528,
            BackboneId::B3 => 300,
            BackboneId::B0 => 224,
            BackboneId::TinyTest => 64,
        }
    }
}

impl fmt::Display for BackboneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackboneId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BackboneId::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| {
                let valid: Vec<_> = BackboneId::ALL.iter().map(|b| b.name()).collect();
                Error::Config(format!("unknown backbone '{s}' (valid: {})", valid.join(", ")))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Concatenate penultimate feature vectors before the head.
    #[default]
    FeatureConcat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreqBranchConfig {
    pub feature_dim: usize,
}

impl Default for FreqBranchConfig {
    fn default() -> Self {
        Self { feature_dim: 128 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneId,
    pub dropout_rate: f64,
    pub pretrained: bool,
    /// Safetensors checkpoint for the backbone; defaults to the weights cache.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freq_branch: Option<FreqBranchConfig>,
    #[serde(default)]
    pub fusion: Fusion,
    /// Seeds backbone (when not pretrained) and frequency-branch init.
    #[serde(default)]
    pub init_seed: u64,
    #[serde(default)]
    pub head_seed: u64,
}

impl ModelConfig {
    pub fn new(backbone: BackboneId) -> Self {
        Self {
            backbone,
            dropout_rate: backbone.default_dropout(),
            pretrained: backbone != BackboneId::TinyTest,
            pretrained_path: None,
            freq_branch: None,
            fusion: Fusion::FeatureConcat,
            init_seed: 0,
            head_seed: 0,
        }
    }

    pub fn tiny() -> Self {
        Self::new(BackboneId::TinyTest)
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout_rate = rate;
        self
    }

    pub fn with_freq_branch(mut self, feature_dim: usize) -> Self {
        self.freq_branch = Some(FreqBranchConfig { feature_dim });
        self
    }

    pub fn with_seeds(mut self, init_seed: u64, head_seed: u64) -> Self {
        self.init_seed = init_seed;
        self.head_seed = head_seed;
        self
    }

    pub fn without_pretrained(mut self) -> Self {
        self.pretrained = false;
        self
    }

    pub fn is_hybrid(&self) -> bool {
        self.freq_branch.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if let Some(fb) = &self.freq_branch {
            if fb.feature_dim == 0 {
                return Err(Error::Config("freq_branch.feature_dim must be positive".into()));
            }
        }
        if self.pretrained && self.backbone == BackboneId::TinyTest {
            return Err(Error::Config("the tiny_test backbone has no pretrained checkpoint".into()));
        }
        Ok(())
    }

    /// Where pretrained weights are read from.
    pub fn resolved_weights_path(&self) -> PathBuf {
        if let Some(p) = &self.pretrained_path {
            return p.clone();
        }
        let dir = std::env::var_os("FAKESCOPE_WEIGHTS_DIR")
            .map(PathBuf::from)
            .or_else(|| {
                std::env::var_os("HOME").map(|h| PathBuf::from(h).join(".cache/fakescope/weights"))
            })
            .unwrap_or_else(|| PathBuf::from("weights"));
        dir.join(format!("efficientnet_{}.safetensors", self.backbone.name()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backbone_names_round_trip() {
        for b in BackboneId::ALL {
            assert_eq!(b.name().parse::<BackboneId>().unwrap(), b);
        }
        let err = "b7".parse::<BackboneId>().unwrap_err().to_string();
        assert!(err.contains("b6, b3, b0, tiny_test"), "{err}");
    }

    #[test]
    fn defaults_follow_the_family() {
        let cfg = ModelConfig::new(BackboneId::B6);
        assert_eq!(cfg.dropout_rate, 0.5);
        assert!(cfg.pretrained);
        assert!(!ModelConfig::tiny().pretrained);
        assert!(ModelConfig::tiny().validate().is_ok());
        let mut bad = ModelConfig::tiny();
        bad.pretrained = true;
        assert!(bad.validate().is_err());
        assert!(ModelConfig::tiny().with_dropout(1.0).validate().is_err());
    }
}
