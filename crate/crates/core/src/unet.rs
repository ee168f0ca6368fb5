//! Learned lung-field segmentation: UNet training and inference, mask
//! refinement, and masked-lung image production.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{
    BatchNorm, BatchNormConfig, Conv2d, Conv2dConfig, ConvTranspose2d, ConvTranspose2dConfig, Optimizer,
    VarBuilder,
};
use image::GrayImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{list_slices, read_slice};
use crate::morph::{closing, fill_holes, opening, StructuringElement};
use crate::nn::params::{load_checkpoint, save_checkpoint, ParamStore};
use crate::nn::schedule::{EarlyStopping, Mode, PlateauScheduler};
use crate::raster::{dice, resize_bilinear, Mask, SLICE_SIZE};

pub const UNET_KIND: &str = "unet";
/// Probability at or above which a pixel is called lung.
pub const MASK_THRESHOLD: f32 = 0.5;
const REFINE_ELEMENT: usize = 5;
const DICE_EPS: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    /// Number of 2× downsampling steps.
    pub depth: usize,
    /// Channels of the first encoder level; doubled per level.
    pub base_width: usize,
    /// Resolution the network runs at; slices are resized to it and
    /// probabilities resized back to the slice size.
    pub work_size: u32,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            depth: 4,
            base_width: 32,
            work_size: SLICE_SIZE,
        }
    }
}

/// Per-pixel lung probability, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbRaster {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl ProbRaster {
    pub fn threshold(&self, t: f32) -> Mask {
        Mask::from_vec(self.width, self.height, self.data.iter().map(|&p| p >= t).collect())
            .expect("dims")
    }
}

/// Hole-free, edge-smoothed lung mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefinedMask(Mask);

impl RefinedMask {
    pub fn mask(&self) -> &Mask {
        &self.0
    }

    pub fn into_mask(self) -> Mask {
        self.0
    }
}

#[derive(Debug, Clone)]
struct ConvBlock {
    c1: Conv2d,
    b1: BatchNorm,
    c2: Conv2d,
    b2: BatchNorm,
}

fn conv3(cin: usize, cout: usize, vb: VarBuilder) -> Result<Conv2d> {
    let cfg = Conv2dConfig {
        padding: 1,
        ..Default::default()
    };
    Ok(candle_nn::conv2d_no_bias(cin, cout, 3, cfg, vb)?)
}

impl ConvBlock {
    fn new(cin: usize, cout: usize, vb: VarBuilder) -> Result<Self> {
        Ok(ConvBlock {
            c1: conv3(cin, cout, vb.pp("conv1"))?,
            b1: candle_nn::batch_norm(cout, BatchNormConfig::default(), vb.pp("bn1"))?,
            c2: conv3(cout, cout, vb.pp("conv2"))?,
            b2: candle_nn::batch_norm(cout, BatchNormConfig::default(), vb.pp("bn2"))?,
        })
    }

    fn forward(&self, xs: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let ys = self.c1.forward(xs)?.apply_t(&self.b1, train)?.relu()?;
        self.c2.forward(&ys)?.apply_t(&self.b2, train)?.relu()
    }
}

/// Encoder–decoder with skip connections and a sigmoid output head.
#[derive(Debug, Clone)]
pub struct SegModel {
    cfg: UNetConfig,
    store: ParamStore,
    down: Vec<ConvBlock>,
    bottom: ConvBlock,
    up: Vec<ConvTranspose2d>,
    merge: Vec<ConvBlock>,
    head: Conv2d,
}

impl SegModel {
    pub fn new(cfg: &UNetConfig, seed: u64, device: &Device) -> Result<Self> {
        if cfg.depth == 0 || cfg.base_width == 0 {
            return Err(Error::Config(format!("degenerate UNet config {cfg:?}")));
        }
        if cfg.work_size % (1 << cfg.depth) != 0 {
            return Err(Error::Config(format!(
                "work size {} not divisible by 2^{}",
                cfg.work_size, cfg.depth
            )));
        }
        let store = ParamStore::new(seed, DType::F32, device);
        let vb = store.var_builder();
        let widths: Vec<usize> = (0..cfg.depth).map(|i| cfg.base_width << i).collect();
        let mut down = Vec::with_capacity(cfg.depth);
        let mut cin = 1;
        for (i, &w) in widths.iter().enumerate() {
            down.push(ConvBlock::new(cin, w, vb.pp(format!("down{i}")))?);
            cin = w;
        }
        let bottom_w = 2 * widths[cfg.depth - 1];
        let bottom = ConvBlock::new(cin, bottom_w, vb.pp("bottom"))?;
        let mut up = Vec::with_capacity(cfg.depth);
        let mut merge = Vec::with_capacity(cfg.depth);
        let mut cin = bottom_w;
        for i in (0..cfg.depth).rev() {
            let w = widths[i];
            let tcfg = ConvTranspose2dConfig {
                stride: 2,
                ..Default::default()
            };
            up.push(candle_nn::conv_transpose2d(cin, w, 2, tcfg, vb.pp(format!("up{i}")))?);
            merge.push(ConvBlock::new(2 * w, w, vb.pp(format!("merge{i}")))?);
            cin = w;
        }
        let head = candle_nn::conv2d(cin, 1, 1, Conv2dConfig::default(), vb.pp("head"))?;
        Ok(SegModel {
            cfg: cfg.clone(),
            store,
            down,
            bottom,
            up,
            merge,
            head,
        })
    }

    /// Same architecture with every parameter and statistic set to zero.
    pub fn zeroed(cfg: &UNetConfig, device: &Device) -> Result<Self> {
        let m = SegModel::new(cfg, 0, device)?;
        m.store.zero_all()?;
        Ok(m)
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Slice size accepted by [`infer_mask`].
    pub fn input_size(&self) -> u32 {
        SLICE_SIZE
    }

    /// `(B, 1, S, S)` in `[0, 1]` → pre-sigmoid logits `(B, 1, S, S)`.
    pub fn forward_logits(&self, xs: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let mut skips = Vec::with_capacity(self.cfg.depth);
        let mut ys = xs.clone();
        for block in &self.down {
            ys = block.forward(&ys, train)?;
            skips.push(ys.clone());
            ys = ys.max_pool2d(2)?;
        }
        ys = self.bottom.forward(&ys, train)?;
        for (up, merge) in self.up.iter().zip(&self.merge) {
            let skip = skips.pop().expect("one skip per level");
            ys = up.forward(&ys)?;
            ys = merge.forward(&Tensor::cat(&[&ys, &skip], 1)?, train)?;
        }
        self.head.forward(&ys)
    }

    fn input_tensor(&self, slices: &[&GrayImage]) -> Result<Tensor> {
        let s = self.cfg.work_size;
        let mut data = Vec::with_capacity(slices.len() * (s * s) as usize);
        for img in slices {
            let src: Vec<f32> = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
            if img.width() == s && img.height() == s {
                data.extend(src);
            } else {
                data.extend(resize_bilinear(&src, img.width(), img.height(), s, s));
            }
        }
        Ok(Tensor::from_vec(data, (slices.len(), 1, s as usize, s as usize), self.store.device())?)
    }

    pub fn save(&self, path: &Path, fingerprint: &str) -> Result<()> {
        let cfg = serde_json::to_value(&self.cfg).map_err(|e| Error::format(path, e.to_string()))?;
        save_checkpoint(path, UNET_KIND, fingerprint, &cfg, &self.store)
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        if ck.kind != UNET_KIND {
            return Err(Error::format(path, format!("expected a {UNET_KIND} checkpoint, found {}", ck.kind)));
        }
        let cfg: UNetConfig =
            serde_json::from_value(ck.config).map_err(|e| Error::format(path, e.to_string()))?;
        let model = SegModel::new(&cfg, 0, device)?;
        model.store.restore(&ck.tensors)?;
        Ok(model)
    }
}

/// Lung probabilities for a batch of 512×512 slices.
pub fn infer_masks(slices: &[&GrayImage], model: &SegModel) -> Result<Vec<ProbRaster>> {
    let size = model.input_size();
    for img in slices {
        if img.dimensions() != (size, size) {
            return Err(Error::Shape(format!(
                "slice {:?} but segmentation model expects {size}x{size}",
                img.dimensions()
            )));
        }
    }
    if slices.is_empty() {
        return Ok(Vec::new());
    }
    let xs = model.input_tensor(slices)?;
    let probs = candle_nn::ops::sigmoid(&model.forward_logits(&xs, false)?)?;
    let work = model.cfg.work_size;
    let flat = probs.flatten_all()?.to_vec1::<f32>()?;
    let per = (work * work) as usize;
    Ok(flat
        .chunks_exact(per)
        .map(|p| {
            let data = if work == size {
                p.to_vec()
            } else {
                resize_bilinear(p, work, work, size, size)
            };
            ProbRaster {
                width: size,
                height: size,
                data: data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            }
        })
        .collect())
}

pub fn infer_mask(slice: &GrayImage, model: &SegModel) -> Result<ProbRaster> {
    Ok(infer_masks(&[slice], model)?.remove(0))
}

/// One opening and one closing with a 5×5 elliptical element, then hole filling.
pub fn refine_mask(raw: &Mask) -> RefinedMask {
    let se = StructuringElement::ellipse(REFINE_ELEMENT);
    let smoothed = closing(&opening(raw, &se, 1), &se, 1);
    RefinedMask(fill_holes(&smoothed))
}

/// Keep slice intensities inside the mask, zero elsewhere.
pub fn apply_mask(slice: &GrayImage, mask: &RefinedMask) -> Result<GrayImage> {
    apply_binary_mask(slice, mask.mask())
}

pub fn apply_binary_mask(slice: &GrayImage, mask: &Mask) -> Result<GrayImage> {
    if slice.dimensions() != mask.dims() {
        return Err(Error::Shape(format!(
            "slice {:?} vs mask {:?}",
            slice.dimensions(),
            mask.dims()
        )));
    }
    let raw = slice
        .as_raw()
        .iter()
        .zip(mask.as_slice())
        .map(|(&v, &m)| if m { v } else { 0 })
        .collect();
    Ok(GrayImage::from_raw(slice.width(), slice.height(), raw).expect("dims"))
}

/// A slice with its lung-field annotation (all annotated classes merged).
#[derive(Debug, Clone)]
pub struct SegPair {
    pub slice: GrayImage,
    pub mask: Mask,
}

/// Interpret an annotation image as binary: it must use only {0, 1} or only {0, 255}.
pub fn binary_mask_from_gray(img: &GrayImage) -> Result<Mask> {
    let mut seen = [false; 256];
    for &v in img.as_raw() {
        seen[v as usize] = true;
    }
    let levels: Vec<usize> = (0..256).filter(|&v| seen[v]).collect();
    let ok = levels.iter().all(|&v| v == 0 || v == 1) || levels.iter().all(|&v| v == 0 || v == 255);
    if !ok {
        return Err(Error::InvalidData(format!(
            "mask is not binary: gray levels {:?}",
            &levels[..levels.len().min(8)]
        )));
    }
    Ok(Mask::from_gray(img))
}

/// Read `<dir>/images/*` and `<dir>/masks/*`, paired by file name.
pub fn load_seg_corpus(dir: &Path) -> Result<Vec<SegPair>> {
    let images = list_slices(&dir.join("images"))?;
    let mut pairs = Vec::with_capacity(images.len());
    for img_path in images {
        let name = img_path.file_name().expect("file name");
        let mask_path: PathBuf = dir.join("masks").join(name);
        let slice = read_slice(&img_path)?;
        let mask_img = read_slice(&mask_path)?;
        let mask = binary_mask_from_gray(&mask_img).map_err(|e| match e {
            Error::InvalidData(m) => Error::InvalidData(format!("{}: {m}", mask_path.display())),
            other => other,
        })?;
        if mask.dims() != slice.dimensions() {
            return Err(Error::Shape(format!(
                "{} and its mask differ in size",
                img_path.display()
            )));
        }
        pairs.push(SegPair { slice, mask });
    }
    Ok(pairs)
}

fn default_lr() -> f64 {
    1e-5
}
fn default_epochs() -> usize {
    100
}
fn default_batch() -> usize {
    4
}
fn default_val_fraction() -> f64 {
    0.2
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
pub struct UNetTrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "default_factor")]
    pub plateau_factor: f64,
    #[serde(default = "default_patience")]
    pub plateau_patience: usize,
    #[serde(default = "default_stop_patience")]
    pub early_stop_patience: usize,
    /// Set from the run-level seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for UNetTrainConfig {
    fn default() -> Self {
        UNetTrainConfig {
            lr: default_lr(),
            max_epochs: default_epochs(),
            batch_size: default_batch(),
            val_fraction: default_val_fraction(),
            plateau_factor: default_factor(),
            plateau_patience: default_patience(),
            early_stop_patience: default_stop_patience(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dice: f64,
}

#[derive(Debug)]
pub struct TrainedSegModel {
    pub model: SegModel,
    pub log: Vec<SegEpoch>,
    pub best_epoch: usize,
}

/// Binary cross-entropy on logits plus soft-Dice loss, both batch means.
fn seg_loss(logits: &Tensor, target: &Tensor) -> candle_core::Result<Tensor> {
    let bce = (logits.relu()? - (logits * target)?)?
        .add(&logits.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?)?
        .mean_all()?;
    let p = candle_nn::ops::sigmoid(logits)?;
    let inter = (&p * target)?.sum_all()?;
    let denom = (p.sum_all()? + target.sum_all()?)?;
    let dice = ((inter.affine(2.0, DICE_EPS))? / denom.affine(1.0, DICE_EPS)?)?;
    bce + dice.affine(-1.0, 1.0)?
}

fn target_tensor(masks: &[&Mask], work: u32, device: &Device) -> Result<Tensor> {
    let mut data = Vec::with_capacity(masks.len() * (work * work) as usize);
    for m in masks {
        let src: Vec<f32> = m.as_slice().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        if m.dims() == (work, work) {
            data.extend(src);
        } else {
            data.extend(
                resize_bilinear(&src, m.width(), m.height(), work, work)
                    .into_iter()
                    .map(|v| if v >= 0.5 { 1.0 } else { 0.0 }),
            );
        }
    }
    Ok(Tensor::from_vec(data, (masks.len(), 1, work as usize, work as usize), device)?)
}

/// Mean soft-Dice overlap of thresholded predictions against annotations at slice resolution.
pub fn mean_dice(model: &SegModel, pairs: &[&SegPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(1.0);
    }
    let mut total = 0.0;
    for p in pairs {
        let prob = infer_mask(&p.slice, model)?;
        total += dice(&prob.threshold(MASK_THRESHOLD), &p.mask);
    }
    Ok(total / pairs.len() as f64)
}

/// Train a UNet with Adam; returns the checkpoint with the lowest validation loss.
pub fn train_unet(
    corpus: &[SegPair],
    model_cfg: &UNetConfig,
    cfg: &UNetTrainConfig,
    device: &Device,
) -> Result<TrainedSegModel> {
    if corpus.is_empty() {
        return Err(Error::Empty("segmentation corpus has no pairs".into()));
    }
    for (i, p) in corpus.iter().enumerate() {
        if p.slice.dimensions() != p.mask.dims() {
            return Err(Error::Shape(format!("corpus pair {i}: slice and mask sizes differ")));
        }
        if p.slice.dimensions() != (SLICE_SIZE, SLICE_SIZE) {
            return Err(Error::Shape(format!(
                "corpus pair {i}: slices must be {SLICE_SIZE}x{SLICE_SIZE}, got {:?}",
                p.slice.dimensions()
            )));
        }
    }
    let model = SegModel::new(model_cfg, cfg.seed, device)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((corpus.len() as f64 * cfg.val_fraction).round() as usize).min(corpus.len() - 1);
    let (val_idx, train_idx) = if n_val == 0 {
        (order.clone(), order.clone())
    } else {
        let (v, t) = order.split_at(n_val);
        (v.to_vec(), t.to_vec())
    };

    let work = model_cfg.work_size;
    let inputs: Vec<Tensor> = corpus
        .iter()
        .map(|p| model.input_tensor(&[&p.slice]))
        .collect::<Result<_>>()?;
    let targets: Vec<Tensor> = corpus
        .iter()
        .map(|p| target_tensor(&[&p.mask], work, device))
        .collect::<Result<_>>()?;
    let batch = |idx: &[usize]| -> Result<(Tensor, Tensor)> {
        let xs: Vec<&Tensor> = idx.iter().map(|&i| &inputs[i]).collect();
        let ys: Vec<&Tensor> = idx.iter().map(|&i| &targets[i]).collect();
        Ok((Tensor::cat(&xs, 0)?, Tensor::cat(&ys, 0)?))
    };

    let mut opt = candle_nn::AdamW::new(
        model.store.trainable_vars(),
        candle_nn::ParamsAdamW {
            lr: cfg.lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut sched = PlateauScheduler::new(cfg.lr, Mode::Min, cfg.plateau_factor, cfg.plateau_patience);
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut best = model.store.snapshot()?;
    let mut log = Vec::new();
    let bs = cfg.batch_size.max(1);

    for epoch in 0..cfg.max_epochs {
        let mut train_order = train_idx.clone();
        train_order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for (step, chunk) in train_order.chunks(bs).enumerate() {
            let (xs, ys) = batch(chunk)?;
            let loss = seg_loss(&model.forward_logits(&xs, true)?, &ys)?;
            let value = loss.to_scalar::<f32>()? as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite { epoch, step, value });
            }
            opt.backward_step(&loss)?;
            loss_sum += value;
            steps += 1;
        }
        let mut val_loss = 0.0;
        for chunk in val_idx.chunks(bs) {
            let (xs, ys) = batch(chunk)?;
            val_loss += seg_loss(&model.forward_logits(&xs, false)?, &ys)?.to_scalar::<f32>()? as f64
                * chunk.len() as f64;
        }
        val_loss /= val_idx.len() as f64;
        let val_pairs: Vec<&SegPair> = val_idx.iter().map(|&i| &corpus[i]).collect();
        let val_dice = mean_dice(&model, &val_pairs)?;
        log.push(SegEpoch {
            epoch,
            lr: opt.learning_rate(),
            train_loss: loss_sum / steps.max(1) as f64,
            val_loss,
            val_dice,
        });
        log::info!("unet epoch {epoch}: val_loss {val_loss:.4} val_dice {val_dice:.4}");
        if stopper.update(epoch, -val_loss) {
            best = model.store.snapshot()?;
        }
        opt.set_learning_rate(sched.step(val_loss));
        if stopper.should_stop() {
            break;
        }
    }
    model.store.restore(&best)?;
    Ok(TrainedSegModel {
        best_epoch: stopper.best_epoch(),
        model,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refine_fills_small_hole() {
        let mut m = Mask::from_fn(64, 64, |x, y| (16..48).contains(&x) && (16..48).contains(&y));
        for y in 30..33 {
            for x in 30..33 {
                m.set(x, y, false);
            }
        }
        let r = refine_mask(&m);
        assert!((30..33).all(|y| (30..33).all(|x| r.mask().get(x, y))));
    }

    #[test]
    fn refine_empty_is_empty() {
        assert!(refine_mask(&Mask::new(32, 32)).mask().is_empty());
    }

    #[test]
    fn apply_mask_cases() {
        let slice = GrayImage::from_fn(8, 8, |x, y| image::Luma([(x * 8 + y) as u8]));
        let full = RefinedMask(Mask::filled(8, 8, true));
        assert_eq!(apply_mask(&slice, &full).unwrap(), slice);
        let empty = RefinedMask(Mask::new(8, 8));
        assert!(apply_mask(&slice, &empty).unwrap().as_raw().iter().all(|&v| v == 0));
        let wrong = RefinedMask(Mask::new(4, 8));
        assert!(apply_mask(&slice, &wrong).is_err());
    }

    #[test]
    fn binary_mask_levels() {
        let ok = GrayImage::from_fn(4, 4, |x, _| image::Luma([if x < 2 { 0 } else { 255 }]));
        assert_eq!(binary_mask_from_gray(&ok).unwrap().count(), 8);
        let bad = GrayImage::from_fn(4, 4, |x, _| image::Luma([x as u8 * 60]));
        assert!(binary_mask_from_gray(&bad).is_err());
    }

    #[test]
    fn empty_corpus_rejected() {
        let r = train_unet(&[], &UNetConfig::default(), &UNetTrainConfig::default(), &Device::Cpu);
        assert!(matches!(r, Err(Error::Empty(_))));
    }

    #[test]
    fn zero_model_outputs_one_half() {
        let cfg = UNetConfig {
            depth: 2,
            base_width: 4,
            work_size: 32,
        };
        let m = SegModel::zeroed(&cfg, &Device::Cpu).unwrap();
        let slice = GrayImage::from_fn(512, 512, |x, y| image::Luma([((x ^ y) & 255) as u8]));
        let p = infer_mask(&slice, &m).unwrap();
        assert_eq!((p.width, p.height), (512, 512));
        assert!(p.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn size_mismatch_rejected() {
        let cfg = UNetConfig {
            depth: 2,
            base_width: 4,
            work_size: 32,
        };
        let m = SegModel::new(&cfg, 1, &Device::Cpu).unwrap();
        assert!(matches!(infer_mask(&GrayImage::new(100, 100), &m), Err(Error::Shape(_))));
    }
}
