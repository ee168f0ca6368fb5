//! Run configuration: one TOML file describing data, hyperparameters and seeds.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::ClassifierTrainConfig;
use crate::error::{Error, Result};
use crate::ingest::Split;
use crate::mlp::MlpConfig;
use crate::nn::model::ModelConfig;
use crate::prepare::PrepareOptions;
use crate::unet::{UNetConfig, UNetTrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root holding one directory per split.
    pub root: PathBuf,
    pub train_split: Split,
    pub val_split: Split,
    pub test_split: Split,
    /// Slice/mask corpus for the segmentation network (`images/`, `masks/`).
    pub seg_corpus: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: PathBuf::from("data"),
            train_split: Split::Train,
            val_split: Split::Val,
            test_split: Split::Test,
            seg_corpus: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictLevel {
    Bert,
    Mlp,
}

impl PredictLevel {
    pub fn as_str(&self) -> &'static str {
        match self {
            PredictLevel::Bert => "bert",
            PredictLevel::Mlp => "mlp",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// Extract training and validation embeddings from augmented clips.
    pub augment: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig { augment: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Write mask/bbox overlays and clip grids during `segment`.
    pub debug_images: bool,
    pub predict_level: PredictLevel,
    /// Also train and score every pooling × activation MLP variant in `evaluate`.
    pub mlp_grid: bool,
    pub data: DataConfig,
    pub prepare: PrepareOptions,
    pub unet: UNetConfig,
    pub unet_train: UNetTrainConfig,
    pub model: ModelConfig,
    pub classifier: ClassifierTrainConfig,
    pub features: FeatureConfig,
    pub mlp: MlpConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("output"),
            seed: 0,
            debug_images: false,
            predict_level: PredictLevel::Mlp,
            mlp_grid: false,
            data: DataConfig::default(),
            prepare: PrepareOptions::default(),
            unet: UNetConfig::default(),
            unet_train: UNetTrainConfig::default(),
            model: ModelConfig::default(),
            classifier: ClassifierTrainConfig::default(),
            features: FeatureConfig::default(),
            mlp: MlpConfig::default(),
        }
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let lr_ok = |lr: f64| lr.is_finite() && lr >= 0.0;
        check(lr_ok(self.unet_train.lr), || "unet_train.lr must be finite and non-negative".into())?;
        check(lr_ok(self.classifier.lr), || "classifier.lr must be finite and non-negative".into())?;
        check(self.mlp.lr.map_or(true, lr_ok), || "mlp.lr must be finite and non-negative".into())?;
        check((0.0..1.0).contains(&self.mlp.dropout), || "mlp.dropout must be in [0, 1)".into())?;
        check((0.0..1.0).contains(&self.unet_train.val_fraction), || {
            "unet_train.val_fraction must be in [0, 1)".into()
        })?;
        check(self.model.frames > 0 && self.model.crop_size > 0, || {
            "model.frames and model.crop_size must be positive".into()
        })?;
        check(self.model.dim() % self.model.bert.heads.max(1) == 0 && self.model.bert.heads > 0, || {
            format!(
                "feature width {} is not divisible by {} attention heads",
                self.model.dim(),
                self.model.bert.heads
            )
        })?;
        check(self.prepare.min_keep > 0, || "prepare.min_keep must be positive".into())?;
        let a = &self.classifier.augment;
        check(a.scale_range[0] > 0.0 && a.scale_range[0] <= a.scale_range[1], || {
            "augment.scale_range must be positive and ordered".into()
        })?;
        check((0.0..=1.0).contains(&a.hflip_prob), || "augment.hflip_prob must be in [0, 1]".into())?;
        check(a.enlarge_frac >= 0.0, || "augment.enlarge_frac must be non-negative".into())?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    /// Copy the run-level seed into every stage.
    pub fn seeded(mut self) -> Self {
        self.unet_train.seed = self.seed;
        self.classifier.seed = self.seed;
        self.mlp.seed = self.seed;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.fingerprint(), cfg.fingerprint());
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg = RunConfig::from_toml("seed = 7\n[mlp]\npooling = \"max\"\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.mlp.pooling, crate::mlp::Pooling::Max);
        assert_eq!(cfg.model.frames, 32);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("sede = 1\n").is_err());
        assert!(RunConfig::from_toml("[mlp]\nfc9 = 3\n").is_err());
    }

    #[test]
    fn fingerprint_tracks_changes() {
        let a = RunConfig::default();
        let b = RunConfig { seed: 1, ..RunConfig::default() };
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_toml("[classifier]\nlr = -1.0\n").is_err());
    }
}
