//! Pipeline configuration: one TOML document covering every stage, with
//! defaults for each knob the training procedure leaves open.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::SplitRatios;
use crate::nn::TrainConfig;
use crate::postprocess::VoteShape;
use crate::synth::SceneSpec;
use crate::targets::{LossKind, SslParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InputConfig {
    /// Band-stack header path.
    pub stack: PathBuf,
    /// Polygon annotation document; ignored when `mask` is set.
    pub annotations: Option<PathBuf>,
    /// Pre-rasterized label mask.
    pub mask: Option<PathBuf>,
}

impl Default for InputConfig {
    fn default() -> Self {
        InputConfig {
            stack: PathBuf::from("scene.bsr"),
            annotations: None,
            mask: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    /// Encoder layer widths, pretrained layerwise.
    pub encoder_dims: Vec<usize>,
    /// Hidden layers between the encoders and the softmax head.
    pub head_dims: Vec<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            encoder_dims: vec![400, 80],
            head_dims: vec![27],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhaseConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub loss: LossKind,
    /// Supervised head-only epochs before the SSL engines run.
    pub warmup_epochs: usize,
    /// Re-run the engines every this many epochs (0 = never).
    pub refresh_period: usize,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        PhaseConfig {
            epochs: 50,
            learning_rate: 0.05,
            batch_size: 32,
        }
    }
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 50,
            learning_rate: 0.01,
            batch_size: 32,
            loss: LossKind::Mse,
            warmup_epochs: 5,
            refresh_period: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostprocessConfig {
    pub radius: usize,
    pub erosion_window: usize,
    pub vote_shape: VoteShape,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            radius: 21,
            erosion_window: 7,
            vote_shape: VoteShape::Disc,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub input: InputConfig,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub split: SplitRatios,
    pub patch_size: usize,
    pub network: NetworkConfig,
    pub pretrain: PhaseConfig,
    pub finetune: FinetuneConfig,
    pub ssl: SslParams,
    pub postprocess: PostprocessConfig,
    pub synth: SceneSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            input: InputConfig::default(),
            output_dir: PathBuf::from("out"),
            seed: 7,
            split: SplitRatios::default(),
            patch_size: 15,
            network: NetworkConfig::default(),
            pretrain: PhaseConfig::default(),
            finetune: FinetuneConfig::default(),
            ssl: SslParams::default(),
            postprocess: PostprocessConfig::default(),
            synth: SceneSpec::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<PipelineConfig> {
        let cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        PipelineConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        if self.patch_size == 0 || self.patch_size % 2 == 0 {
            return Err(Error::Config("patch_size must be odd".into()));
        }
        if self.network.encoder_dims.is_empty() {
            return Err(Error::Config("need at least one encoder layer".into()));
        }
        self.pretrain_cfg().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.finetune_cfg().validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.ssl.unlabeled_weight < 0.0 {
            return Err(Error::Config("unlabeled_weight must be >= 0".into()));
        }
        self.synth.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn pretrain_cfg(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.pretrain.epochs,
            learning_rate: self.pretrain.learning_rate,
            batch_size: self.pretrain.batch_size,
            seed: self.seed,
        }
    }

    pub fn finetune_cfg(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.finetune.epochs,
            learning_rate: self.finetune.learning_rate,
            batch_size: self.finetune.batch_size,
            seed: self.seed.wrapping_add(0x5eed_f17e),
        }
    }

    pub fn warmup_cfg(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.finetune.warmup_epochs.max(1),
            learning_rate: self.finetune.learning_rate,
            batch_size: self.finetune.batch_size,
            seed: self.seed.wrapping_add(0x0a0a_0a0a),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_toml();
        let back = PipelineConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_document_fills_defaults() {
        let cfg = PipelineConfig::from_toml(
            r#"
            seed = 42
            [finetune]
            loss = "weiave"
            epochs = 3
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.finetune.loss, LossKind::WeiAve);
        assert_eq!(cfg.finetune.epochs, 3);
        assert_eq!(cfg.pretrain.epochs, 50);
        assert_eq!(cfg.patch_size, 15);
        assert_eq!(cfg.ssl.anchor.num_anchors, 500);
    }

    #[test]
    fn bad_values_rejected() {
        assert!(PipelineConfig::from_toml("patch_size = 4").is_err());
        assert!(PipelineConfig::from_toml("[finetune]\nloss = \"entropy\"").is_err());
        assert!(PipelineConfig::from_toml("[split]\nlabeled = 0.9\nunlabeled = 0.9\ntest = 0.0").is_err());
    }
}
