//! Clip building, first-level classifier training, and per-volume prediction.

use std::borrow::Cow;
use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, D};
use candle_nn::Optimizer;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compose::{augment_clip, transform_eval, AugmentConfig, Clip};
use crate::error::{Error, Result};
use crate::ingest::Label;
use crate::nn::model::{Classifier3d, ModelConfig};
use crate::nn::schedule::{EarlyStopping, Mode, PlateauScheduler};
use crate::prepare::{load_prepared, PreparedVolume};
use crate::raster::Planar;
use crate::select::{resample_eval, resample_test, resample_train, SliceSet};

/// Random-access collection of prepared volumes.
pub trait VolumeSource {
    fn len(&self) -> usize;
    fn load(&self, index: usize) -> Result<Cow<'_, PreparedVolume>>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl VolumeSource for [PreparedVolume] {
    fn len(&self) -> usize {
        <[PreparedVolume]>::len(self)
    }

    fn load(&self, index: usize) -> Result<Cow<'_, PreparedVolume>> {
        Ok(Cow::Borrowed(&self[index]))
    }
}

impl VolumeSource for Vec<PreparedVolume> {
    fn len(&self) -> usize {
        <[PreparedVolume]>::len(self)
    }

    fn load(&self, index: usize) -> Result<Cow<'_, PreparedVolume>> {
        Ok(Cow::Borrowed(&self[index]))
    }
}

/// Prepared volumes stored one directory each, read on demand.
#[derive(Debug, Clone)]
pub struct DiskVolumes {
    pub dirs: Vec<PathBuf>,
}

impl DiskVolumes {
    /// Every subdirectory of `root`, sorted by name.
    pub fn open(root: &Path) -> Result<Self> {
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort_by(|a, b| crate::ingest::natural_cmp(&a.to_string_lossy(), &b.to_string_lossy()));
        Ok(DiskVolumes { dirs })
    }
}

impl VolumeSource for DiskVolumes {
    fn len(&self) -> usize {
        self.dirs.len()
    }

    fn load(&self, index: usize) -> Result<Cow<'_, PreparedVolume>> {
        Ok(Cow::Owned(load_prepared(&self.dirs[index])?))
    }
}

fn set_frames(pv: &PreparedVolume, set: &SliceSet) -> Result<Vec<Planar<f32>>> {
    let mut cache: HashMap<usize, Planar<f32>> = HashMap::new();
    set.indices
        .iter()
        .map(|&i| {
            if let Some(f) = cache.get(&i) {
                return Ok(f.clone());
            }
            let f = pv.frame(i)?.to_f32();
            cache.insert(i, f.clone());
            Ok(f)
        })
        .collect()
}

/// Deterministic clip for one set: eval resize and central crop on every frame.
pub fn eval_clip_for(pv: &PreparedVolume, set: &SliceSet, size: u32) -> Result<Clip> {
    let mut cache: HashMap<usize, Planar<f32>> = HashMap::new();
    let frames = set
        .indices
        .iter()
        .map(|&i| {
            if let Some(f) = cache.get(&i) {
                return Ok(f.clone());
            }
            let f = transform_eval(&pv.frame(i)?.to_f32(), size)?;
            cache.insert(i, f.clone());
            Ok(f)
        })
        .collect::<Result<Vec<_>>>()?;
    Clip::from_frames(&frames)
}

/// Random set plus one augmentation draw shared by the whole clip.
pub fn train_clip<R: Rng + ?Sized>(
    pv: &PreparedVolume,
    frames: usize,
    size: u32,
    aug: &AugmentConfig,
    rng: &mut R,
) -> Result<Clip> {
    let set = resample_train(&pv.selection, frames, rng);
    let raw = set_frames(pv, &set)?;
    Clip::from_frames(&augment_clip(&raw, aug, size, rng)?)
}

pub fn eval_clip(pv: &PreparedVolume, frames: usize, size: u32) -> Result<Clip> {
    eval_clip_for(pv, &resample_eval(&pv.selection, frames), size)
}

/// Clips for every test-time set, in set order.
pub fn test_clips(pv: &PreparedVolume, frames: usize, size: u32) -> Result<Vec<(SliceSet, Clip)>> {
    resample_test(&pv.selection, frames)
        .into_iter()
        .map(|s| {
            let c = eval_clip_for(pv, &s, size)?;
            Ok((s, c))
        })
        .collect()
}

fn require_label(pv: &PreparedVolume) -> Result<u32> {
    pv.label
        .and_then(|l| l.class_index())
        .map(|c| c as u32)
        .ok_or_else(|| Error::InvalidData(format!("volume {} has no label", pv.volume_id)))
}

fn default_lr() -> f64 {
    1e-5
}
fn default_epochs() -> usize {
    200
}
fn default_batch() -> usize {
    4
}
fn default_factor() -> f64 {
    0.1
}
fn default_patience() -> usize {
    5
}
fn default_stop_patience() -> usize {
    15
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierTrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_factor")]
    pub plateau_factor: f64,
    #[serde(default = "default_patience")]
    pub plateau_patience: usize,
    #[serde(default = "default_stop_patience")]
    pub early_stop_patience: usize,
    #[serde(default)]
    pub augment: AugmentConfig,
    /// Set from the run-level seed.
    #[serde(skip)]
    pub seed: u64,
    /// Optional checkpoint whose backbone tensors initialize the model.
    #[serde(default)]
    pub pretrained: Option<PathBuf>,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            lr: default_lr(),
            max_epochs: default_epochs(),
            batch_size: default_batch(),
            plateau_factor: default_factor(),
            plateau_patience: default_patience(),
            early_stop_patience: default_stop_patience(),
            augment: AugmentConfig::default(),
            seed: 0,
            pretrained: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug)]
pub struct TrainedClassifier {
    pub model: Classifier3d,
    pub log: Vec<ClassifierEpoch>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
}

/// Validation loss and accuracy with one symmetric-uniform clip per volume.
pub fn validate(model: &Classifier3d, val: &dyn VolumeSource, batch: usize) -> Result<(f64, f64)> {
    let cfg = model.config();
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let n = val.len();
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let mut clips = Vec::with_capacity(chunk.len());
        let mut labels = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let pv = val.load(i)?;
            labels.push(require_label(&pv)?);
            clips.push(eval_clip(&pv, cfg.frames, cfg.crop_size)?);
        }
        let refs: Vec<&Clip> = clips.iter().collect();
        let out = model.forward_t(&model.batch_tensor(&refs)?, false)?;
        let ys = Tensor::new(labels.as_slice(), model.device())?;
        let logits = out.logits.to_dtype(DType::F32)?;
        loss_sum += candle_nn::loss::cross_entropy(&logits, &ys)?.to_scalar::<f32>()? as f64 * chunk.len() as f64;
        let pred = logits.argmax(D::Minus1)?.to_vec1::<u32>()?;
        correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok((loss_sum / n as f64, correct as f64 / n as f64))
}

/// Softmax cross-entropy with Adam, one random set per volume per epoch,
/// plateau reduction on validation loss, and best-by-validation-accuracy
/// checkpoint selection.
pub fn train_classifier(
    train: &dyn VolumeSource,
    val: &dyn VolumeSource,
    model_cfg: &ModelConfig,
    cfg: &ClassifierTrainConfig,
    device: &Device,
) -> Result<TrainedClassifier> {
    if train.is_empty() {
        return Err(Error::Empty("training split has no volumes".into()));
    }
    if val.is_empty() {
        return Err(Error::Empty("validation split has no volumes".into()));
    }
    let model = Classifier3d::new(model_cfg, cfg.seed, DType::F32, device)?;
    if let Some(path) = &cfg.pretrained {
        let n = model.load_pretrained_backbone(path)?;
        log::info!("initialized {n} backbone tensors from {}", path.display());
    }
    let mut opt = candle_nn::AdamW::new(
        model.store().trainable_vars(),
        candle_nn::ParamsAdamW {
            lr: cfg.lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut sched = PlateauScheduler::new(cfg.lr, Mode::Min, cfg.plateau_factor, cfg.plateau_patience);
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x0c1a_55));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = model.store().snapshot()?;
    let mut log = Vec::new();
    let bs = cfg.batch_size.max(1);

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(bs).enumerate() {
            let mut clips = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let pv = train.load(i)?;
                labels.push(require_label(&pv)?);
                clips.push(train_clip(&pv, model_cfg.frames, model_cfg.crop_size, &cfg.augment, &mut rng)?);
            }
            let refs: Vec<&Clip> = clips.iter().collect();
            let out = model.forward_t(&model.batch_tensor(&refs)?, true)?;
            let ys = Tensor::new(labels.as_slice(), device)?;
            let loss = candle_nn::loss::cross_entropy(&out.logits, &ys)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::NonFinite { epoch, step, value });
            }
            opt.backward_step(&loss)?;
            loss_sum += value;
            steps += 1;
        }
        let (val_loss, val_acc) = validate(&model, val, bs)?;
        let entry = ClassifierEpoch {
            epoch,
            lr: opt.learning_rate(),
            train_loss: loss_sum / steps as f64,
            val_acc,
        };
        log::info!(
            "epoch {epoch}: lr {:.2e} train_loss {:.4} val_loss {val_loss:.4} val_acc {val_acc:.4}",
            entry.lr,
            entry.train_loss
        );
        log.push(entry);
        if stopper.update(epoch, val_acc) {
            best = model.store().snapshot()?;
        }
        opt.set_learning_rate(sched.step(val_loss));
        if stopper.should_stop() {
            break;
        }
    }
    model.store().restore(&best)?;
    Ok(TrainedClassifier {
        best_epoch: stopper.best_epoch(),
        best_val_acc: stopper.best().unwrap_or(0.0),
        model,
        log,
    })
}

pub fn write_training_log(path: &Path, log: &[ClassifierEpoch]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for e in log {
        w.serialize(e).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumePrediction {
    pub volume_id: String,
    pub per_set_logits: Vec<[f32; 2]>,
    pub aggregate_prob: [f64; 2],
    pub predicted_class: Label,
}

pub fn softmax2(logits: [f32; 2]) -> [f64; 2] {
    let (a, b) = (logits[0] as f64, logits[1] as f64);
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    let s = ea + eb;
    [ea / s, eb / s]
}

/// Arithmetic mean of per-set probability vectors.
pub fn mean_probabilities(probs: &[[f64; 2]]) -> Result<[f64; 2]> {
    if probs.is_empty() {
        return Err(Error::Empty("no slice sets to aggregate".into()));
    }
    let n = probs.len() as f64;
    let a = probs.iter().map(|p| p[0]).sum::<f64>() / n;
    let b = probs.iter().map(|p| p[1]).sum::<f64>() / n;
    Ok([a, b])
}

pub fn argmax2(p: [f64; 2]) -> usize {
    if p[1] > p[0] {
        1
    } else {
        0
    }
}

/// Mean-softmax prediction over a volume's clips.
pub fn predict_volume(volume_id: &str, clips: &[Clip], model: &Classifier3d, batch: usize) -> Result<VolumePrediction> {
    if clips.is_empty() {
        return Err(Error::Empty(format!("no slice sets for volume {volume_id}")));
    }
    let mut per_set_logits = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(batch.max(1)) {
        let refs: Vec<&Clip> = chunk.iter().collect();
        let out = model.forward_t(&model.batch_tensor(&refs)?, false)?;
        for row in out.logits.to_dtype(DType::F32)?.to_vec2::<f32>()? {
            per_set_logits.push([row[0], row[1]]);
        }
    }
    let probs: Vec<[f64; 2]> = per_set_logits.iter().map(|&l| softmax2(l)).collect();
    let aggregate_prob = mean_probabilities(&probs)?;
    Ok(VolumePrediction {
        volume_id: volume_id.to_string(),
        per_set_logits,
        aggregate_prob,
        predicted_class: Label::from_class_index(argmax2(aggregate_prob)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_of_three() {
        let p = mean_probabilities(&[[0.9, 0.1], [0.8, 0.2], [0.1, 0.9]]).unwrap();
        assert!((p[0] - 0.6).abs() < 1e-12 && (p[1] - 0.4).abs() < 1e-12);
        assert_eq!(argmax2(p), 0);
        assert!(mean_probabilities(&[]).is_err());
    }

    #[test]
    fn softmax_on_simplex() {
        for l in [[0.0, 0.0], [50.0, -50.0], [1e3, 1e3 + 1.0]] {
            let p = softmax2(l);
            assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn single_set_matches_its_softmax() {
        let p = softmax2([0.3, -1.2]);
        assert_eq!(mean_probabilities(&[p]).unwrap(), p);
    }
}
