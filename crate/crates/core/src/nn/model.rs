//! First-level classifier: R(2+1)D backbone plus attention or mean pooling head.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::backbone::{BackboneConfig, R2Plus1d};
use super::bert::{BertConfig, BertPoolHead, MeanPoolHead};
use super::params::{load_checkpoint, save_checkpoint, DropoutRng, ParamStore};
use crate::compose::{Clip, CROP_SIZE};
use crate::error::{Error, Result};
use crate::select::SET_LEN;

pub const NUM_CLASSES: usize = 2;
pub const CLASSIFIER_KIND: &str = "classifier3d";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Attention pooling with a classification token.
    Bert,
    /// Temporal average pooling (ablation).
    MeanPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head: HeadKind,
    pub bert: BertConfig,
    pub frames: usize,
    pub crop_size: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::r2plus1d_34(),
            head: HeadKind::Bert,
            bert: BertConfig::default(),
            frames: SET_LEN,
            crop_size: CROP_SIZE,
        }
    }
}

impl ModelConfig {
    pub fn steps(&self) -> usize {
        self.backbone.temporal_out(self.frames)
    }

    pub fn dim(&self) -> usize {
        self.backbone.out_dim()
    }
}

/// Backbone output for one clip: `T'` rows of `D` features.
#[derive(Debug, Clone)]
pub struct ClipFeatures {
    /// `(T', D)`.
    pub tensor: Tensor,
}

impl ClipFeatures {
    pub fn steps(&self) -> usize {
        self.tensor.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.tensor.dims()[1]
    }
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// `(B, 2)`.
    pub logits: Tensor,
    /// `(B, D)`: classification-token output, or the time-averaged features for
    /// the mean-pooling head.
    pub embedding: Tensor,
}

#[derive(Debug, Clone)]
enum Head {
    Bert(BertPoolHead),
    Mean(MeanPoolHead),
}

#[derive(Debug, Clone)]
pub struct Classifier3d {
    cfg: ModelConfig,
    store: ParamStore,
    backbone: R2Plus1d,
    head: Head,
    dropout: DropoutRng,
}

impl Classifier3d {
    pub fn new(cfg: &ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        if cfg.frames == 0 || cfg.crop_size == 0 {
            return Err(Error::Config("frames and crop_size must be positive".into()));
        }
        let store = ParamStore::new(seed, dtype, device);
        let vb = store.var_builder();
        let backbone = R2Plus1d::new(&cfg.backbone, vb.pp("backbone"))?;
        let dropout = DropoutRng::new(seed ^ 0x5eed_d00d);
        let head = match cfg.head {
            HeadKind::Bert => Head::Bert(BertPoolHead::new(
                cfg.dim(),
                cfg.steps(),
                NUM_CLASSES,
                &cfg.bert,
                dropout.clone(),
                vb.pp("head"),
            )?),
            HeadKind::MeanPool => Head::Mean(MeanPoolHead::new(cfg.dim(), NUM_CLASSES, vb.pp("head"))?),
        };
        Ok(Classifier3d {
            cfg: cfg.clone(),
            store,
            backbone,
            head,
            dropout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn bert_head(&self) -> Option<&BertPoolHead> {
        match &self.head {
            Head::Bert(h) => Some(h),
            Head::Mean(_) => None,
        }
    }

    pub fn reseed_dropout(&self, seed: u64) {
        self.dropout.reseed(seed);
    }

    fn check_clip(&self, clip: &Clip) -> Result<()> {
        if clip.frames != self.cfg.frames || clip.size != self.cfg.crop_size {
            return Err(Error::Shape(format!(
                "clip {}x3x{}x{} but model expects {}x3x{}x{}",
                clip.frames, clip.size, clip.size, self.cfg.frames, self.cfg.crop_size, self.cfg.crop_size
            )));
        }
        Ok(())
    }

    /// Stack clips into a `(B, T, 3, S, S)` tensor.
    pub fn batch_tensor(&self, clips: &[&Clip]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(clips.iter().map(|c| c.data.len()).sum());
        for c in clips {
            self.check_clip(c)?;
            data.extend_from_slice(&c.data);
        }
        let s = self.cfg.crop_size as usize;
        Ok(Tensor::from_vec(data, (clips.len(), self.cfg.frames, 3, s, s), self.device())?
            .to_dtype(self.store.dtype())?)
    }

    /// Backbone features without temporal pooling (eval mode).
    pub fn forward_features(&self, clip: &Clip) -> Result<ClipFeatures> {
        let xs = self.batch_tensor(&[clip])?;
        let f = self.backbone.forward(&xs, false)?;
        Ok(ClipFeatures {
            tensor: f.squeeze(0)?,
        })
    }

    /// Batched backbone features `(B, T', D)`.
    pub fn features_t(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.backbone.forward(xs, train)?)
    }

    /// Pool `(B, T', D)` features with this model's head.
    pub fn head_t(&self, features: &Tensor, train: bool) -> Result<ModelOutput> {
        match &self.head {
            Head::Bert(h) => {
                let out = h.forward(features, train)?;
                Ok(ModelOutput {
                    logits: out.logits,
                    embedding: out.embedding,
                })
            }
            Head::Mean(h) => {
                let (logits, embedding) = h.forward(features)?;
                Ok(ModelOutput { logits, embedding })
            }
        }
    }

    pub fn forward_t(&self, xs: &Tensor, train: bool) -> Result<ModelOutput> {
        let f = self.features_t(xs, train)?;
        self.head_t(&f, train)
    }

    /// Attention pooling of one clip's features: `(logits, embedding)`.
    pub fn bert_pool(&self, features: &ClipFeatures) -> Result<(Vec<f32>, Vec<f32>)> {
        let head = self
            .bert_head()
            .ok_or_else(|| Error::Config("model was built without the attention head".into()))?;
        let out = head.forward(&features.tensor.unsqueeze(0)?, false)?;
        Ok((to_vec_f32(&out.logits)?, to_vec_f32(&out.embedding)?))
    }

    /// Eval-mode logits and embedding for one clip.
    pub fn predict_clip(&self, clip: &Clip) -> Result<(Vec<f32>, Vec<f32>)> {
        let xs = self.batch_tensor(&[clip])?;
        let out = self.forward_t(&xs, false)?;
        Ok((to_vec_f32(&out.logits)?, to_vec_f32(&out.embedding)?))
    }

    pub fn save(&self, path: &Path, fingerprint: &str) -> Result<()> {
        let cfg = serde_json::to_value(&self.cfg).map_err(|e| Error::format(path, e.to_string()))?;
        save_checkpoint(path, CLASSIFIER_KIND, fingerprint, &cfg, &self.store)
    }

    /// Rebuild a model from a checkpoint written by [`Classifier3d::save`].
    pub fn load(path: &Path, device: &Device) -> Result<(Self, String)> {
        let ck = load_checkpoint(path)?;
        if ck.kind != CLASSIFIER_KIND {
            return Err(Error::format(path, format!("expected a {CLASSIFIER_KIND} checkpoint, found {}", ck.kind)));
        }
        let cfg: ModelConfig =
            serde_json::from_value(ck.config.clone()).map_err(|e| Error::format(path, e.to_string()))?;
        let model = Classifier3d::new(&cfg, 0, DType::F32, device)?;
        model.store.restore(&ck.tensors)?;
        Ok((model, ck.fingerprint))
    }

    /// Copy matching backbone tensors from a pretrained checkpoint.
    pub fn load_pretrained_backbone(&self, path: &Path) -> Result<usize> {
        let ck = load_checkpoint(path)?;
        let backbone: Vec<_> = ck
            .tensors
            .into_iter()
            .filter(|(n, _)| n.starts_with("backbone."))
            .collect();
        self.store.restore_partial(&backbone)
    }
}

fn to_vec_f32(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
}
