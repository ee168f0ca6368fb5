//! Stage orchestration: every stage reads its inputs from, and writes its
//! outputs to, the run's output directory.

use std::fmt;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::Device;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{
    argmax2, predict_volume, softmax2, test_clips, train_classifier, write_training_log, DiskVolumes,
    VolumePrediction, VolumeSource,
};
use crate::compose::{augment_clip, clip_grid, Clip};
use crate::config::{PredictLevel, RunConfig};
use crate::error::{Error, Result};
use crate::features::{extract_features, read_feature_cache, EmbeddingRecord, FeatureCacheWriter};
use crate::ingest::{load_volume, read_manifest, scan_split, write_manifest, Label, Split};
use crate::metrics::{evaluate, MetricsReport};
use crate::mlp::{mlp_forward, train_mlp, volume_vectors, Activation, Mlp, MlpConfig, Pooling, VolumeVector};
use crate::morph::render_overlay;
use crate::nn::model::Classifier3d;
use crate::prepare::{prepare_volume, save_prepared, PreparedVolume};
use crate::raster::Mask;
use crate::select::{write_selection_report, SelectionRow};
use crate::unet::{load_seg_corpus, train_unet, SegModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Preprocess,
    TrainUnet,
    Segment,
    TrainClassifier,
    ExtractFeatures,
    TrainMlp,
    Evaluate,
    Predict,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Preprocess,
        Stage::TrainUnet,
        Stage::Segment,
        Stage::TrainClassifier,
        Stage::ExtractFeatures,
        Stage::TrainMlp,
        Stage::Evaluate,
        Stage::Predict,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Preprocess => "preprocess",
            Stage::TrainUnet => "train-unet",
            Stage::Segment => "segment",
            Stage::TrainClassifier => "train-classifier",
            Stage::ExtractFeatures => "extract-features",
            Stage::TrainMlp => "train-mlp",
            Stage::Evaluate => "evaluate",
            Stage::Predict => "predict",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

/// File locations inside the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn manifest(&self, split: Split) -> PathBuf {
        self.root.join("manifests").join(format!("{split}.csv"))
    }
    pub fn unet(&self) -> PathBuf {
        self.root.join("models").join("unet.ckpt")
    }
    pub fn classifier(&self) -> PathBuf {
        self.root.join("models").join("classifier.ckpt")
    }
    pub fn mlp(&self) -> PathBuf {
        self.root.join("models").join("mlp.ckpt")
    }
    pub fn prepared(&self, split: Split) -> PathBuf {
        self.root.join("prepared").join(split.as_str())
    }
    pub fn masks(&self, split: Split) -> PathBuf {
        self.root.join("masks").join(split.as_str())
    }
    pub fn debug(&self, split: Split) -> PathBuf {
        self.root.join("debug").join(split.as_str())
    }
    pub fn selection(&self, split: Split) -> PathBuf {
        self.root.join("reports").join(format!("selection_{split}.csv"))
    }
    pub fn skipped(&self, split: Split) -> PathBuf {
        self.root.join("reports").join(format!("skipped_{split}.csv"))
    }
    pub fn features(&self, split: Split) -> PathBuf {
        self.root.join("features").join(format!("{split}.fcv1"))
    }
    pub fn log(&self, name: &str) -> PathBuf {
        self.root.join("logs").join(format!("{name}.csv"))
    }
    pub fn metrics(&self, split: Split) -> PathBuf {
        self.root.join("reports").join(format!("metrics_{split}.json"))
    }
    pub fn mlp_grid(&self) -> PathBuf {
        self.root.join("reports").join("mlp_grid.json")
    }
    pub fn predictions(&self, split: Split, level: PredictLevel) -> PathBuf {
        self.root
            .join("predictions")
            .join(format!("{split}_{}.csv", level.as_str()))
    }
    pub fn marker(&self, stage: Stage) -> PathBuf {
        self.root.join("stages").join(format!("{}.json", stage.name()))
    }
}

/// Completion record written after a stage succeeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMarker {
    pub stage: String,
    pub fingerprint: String,
    pub produced: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    /// True when the stage had already completed and was not re-run.
    pub reused: bool,
    pub produced: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedVolume {
    pub volume_id: String,
    pub reason: String,
}

/// One row of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub volume_id: String,
    pub prob_covid: f64,
    pub prob_noncovid: f64,
    pub pred: Label,
    pub level: String,
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    if rows.is_empty() {
        w.write_record(header).map_err(|e| Error::format(path, e.to_string()))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

/// Binary mask as a 1-bit grayscale PNG (white = lung).
pub fn write_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), mask.width(), mask.height());
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::One);
    let row_bytes = (mask.width() as usize).div_ceil(8);
    let mut data = vec![0u8; row_bytes * mask.height() as usize];
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) {
                data[y as usize * row_bytes + x as usize / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    let fail = |e: png::EncodingError| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = enc.write_header().map_err(fail)?;
    w.write_image_data(&data).map_err(fail)?;
    w.finish().map_err(fail)
}

fn prediction_row(volume_id: &str, prob: [f64; 2], level: PredictLevel) -> PredictionRow {
    PredictionRow {
        volume_id: volume_id.to_string(),
        prob_covid: prob[0],
        prob_noncovid: prob[1],
        pred: Label::from_class_index(argmax2(prob)),
        level: level.as_str().to_string(),
    }
}

const PREDICTION_HEADER: [&str; 5] = ["volume_id", "prob_covid", "prob_noncovid", "pred", "level"];

#[derive(Debug, Clone, Serialize)]
struct LevelMetrics {
    level: String,
    volumes: usize,
    skipped: Vec<String>,
    metrics: MetricsReport,
}

#[derive(Debug, Clone, Serialize)]
struct GridEntry {
    pooling: Pooling,
    activation: Activation,
    lr: f64,
    best_epoch: usize,
    val_acc: f64,
}

pub struct Pipeline {
    cfg: RunConfig,
    layout: Layout,
    force: bool,
    device: Device,
}

impl Pipeline {
    pub fn new(cfg: RunConfig, force: bool) -> Self {
        let cfg = cfg.seeded();
        Pipeline {
            layout: Layout {
                root: cfg.output_dir.clone(),
            },
            cfg,
            force,
            device: Device::Cpu,
        }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    fn require(&self, path: &Path, stage: Stage) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(Error::MissingStage {
                stage: stage.name().to_string(),
                artifact: path.to_path_buf(),
            })
        }
    }

    fn splits(&self) -> [Split; 3] {
        [self.cfg.data.train_split, self.cfg.data.val_split, self.cfg.data.test_split]
    }

    /// Splits that made it through `preprocess`.
    fn manifest_splits(&self) -> Result<Vec<Split>> {
        self.require(&self.layout.manifest(self.cfg.data.train_split), Stage::Preprocess)?;
        Ok(self
            .splits()
            .into_iter()
            .filter(|&s| self.layout.manifest(s).exists())
            .collect())
    }

    pub fn run(&self, stage: Stage) -> Result<StageOutcome> {
        let marker_path = self.layout.marker(stage);
        let fingerprint = self.cfg.fingerprint();
        if !self.force && marker_path.exists() {
            let text = fs::read_to_string(&marker_path).map_err(|e| Error::io(&marker_path, e))?;
            let marker: StageMarker =
                serde_json::from_str(&text).map_err(|e| Error::format(&marker_path, e.to_string()))?;
            if marker.fingerprint != fingerprint {
                log::warn!("stage {stage} was completed under a different configuration; use --force to redo it");
            }
            log::info!("stage {stage} already complete");
            return Ok(StageOutcome {
                stage,
                reused: true,
                produced: marker.produced,
            });
        }
        fs::create_dir_all(&self.layout.root).map_err(|e| Error::io(&self.layout.root, e))?;
        let config_copy = self.layout.root.join("run_config.toml");
        fs::write(&config_copy, self.cfg.to_toml()?).map_err(|e| Error::io(&config_copy, e))?;
        let produced = match stage {
            Stage::Preprocess => self.preprocess()?,
            Stage::TrainUnet => self.train_unet()?,
            Stage::Segment => self.segment()?,
            Stage::TrainClassifier => self.train_classifier()?,
            Stage::ExtractFeatures => self.extract_features()?,
            Stage::TrainMlp => self.train_mlp()?,
            Stage::Evaluate => self.evaluate()?,
            Stage::Predict => self.predict()?,
        };
        write_json(
            &marker_path,
            &StageMarker {
                stage: stage.name().to_string(),
                fingerprint,
                produced: produced.clone(),
            },
        )?;
        Ok(StageOutcome {
            stage,
            reused: false,
            produced,
        })
    }

    /// Run every stage in order.
    pub fn run_all(&self) -> Result<Vec<StageOutcome>> {
        Stage::ALL.into_iter().map(|s| self.run(s)).collect()
    }

    fn preprocess(&self) -> Result<Vec<PathBuf>> {
        let root = &self.cfg.data.root;
        let mut produced = Vec::new();
        for split in self.splits() {
            let required = split != self.cfg.data.test_split;
            if !required && !root.join(split.as_str()).is_dir() {
                log::warn!("no {split} split under {}", root.display());
                continue;
            }
            let report = scan_split(root, split)?;
            if report.entries.is_empty() {
                if required {
                    return Err(Error::Empty(format!("{split} split has no volumes")));
                }
                continue;
            }
            let path = self.layout.manifest(split);
            ensure_parent(&path)?;
            write_manifest(&path, &report.entries)?;
            log::info!("{split}: {} volumes, {} empty directories skipped", report.entries.len(), report.skipped.len());
            produced.push(path);
        }
        Ok(produced)
    }

    fn train_unet(&self) -> Result<Vec<PathBuf>> {
        let dir = self
            .cfg
            .data
            .seg_corpus
            .as_ref()
            .ok_or_else(|| Error::Config("data.seg_corpus is not set".into()))?;
        let corpus = load_seg_corpus(dir)?;
        let trained = train_unet(&corpus, &self.cfg.unet, &self.cfg.unet_train, &self.device)?;
        let ckpt = self.layout.unet();
        ensure_parent(&ckpt)?;
        trained.model.save(&ckpt, &self.cfg.fingerprint())?;
        let log_path = self.layout.log("unet");
        write_csv(&log_path, &trained.log, &["epoch", "lr", "train_loss", "val_loss", "val_dice"])?;
        Ok(vec![ckpt, log_path])
    }

    fn segment(&self) -> Result<Vec<PathBuf>> {
        let splits = self.manifest_splits()?;
        self.require(&self.layout.unet(), Stage::TrainUnet)?;
        let seg = SegModel::load(&self.layout.unet(), &self.device)?;
        let mut produced = Vec::new();
        for split in splits {
            let entries = read_manifest(&self.layout.manifest(split))?;
            let out_dir = self.layout.prepared(split);
            for dir in [out_dir.clone(), self.layout.masks(split), self.layout.debug(split)] {
                if dir.exists() {
                    fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                }
            }
            let mut rows: Vec<SelectionRow> = Vec::new();
            let mut skipped: Vec<SkippedVolume> = Vec::new();
            for entry in &entries {
                let vol = load_volume(entry)?;
                let prepared = match prepare_volume(&vol, &seg, &self.cfg.prepare) {
                    Ok(p) => p,
                    Err(e @ (Error::Unsegmentable(_) | Error::Shape(_) | Error::Empty(_))) => {
                        log::warn!("skipping {}: {e}", vol.volume_id);
                        skipped.push(SkippedVolume {
                            volume_id: vol.volume_id.clone(),
                            reason: e.to_string(),
                        });
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                save_prepared(&out_dir.join(&vol.volume_id), &prepared.volume)?;
                let mask_dir = self.layout.masks(split).join(&vol.volume_id);
                fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;
                for (i, m) in &prepared.masks {
                    let stem = Path::new(&vol.slice_names[*i])
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_else(|| i.to_string());
                    write_mask_png(&mask_dir.join(format!("{stem}.png")), m.mask())?;
                }
                if self.cfg.debug_images {
                    self.write_debug(split, &vol.slices, &prepared.coarse, &prepared.volume)?;
                }
                rows.push(prepared.report);
            }
            let report_path = self.layout.selection(split);
            ensure_parent(&report_path)?;
            write_selection_report(&report_path, &rows)?;
            let skipped_path = self.layout.skipped(split);
            write_csv(&skipped_path, &skipped, &["volume_id", "reason"])?;
            produced.extend([out_dir, self.layout.masks(split), report_path, skipped_path]);
        }
        Ok(produced)
    }

    fn write_debug(
        &self,
        split: Split,
        slices: &[image::GrayImage],
        coarse: &[crate::morph::CoarseMask],
        pv: &PreparedVolume,
    ) -> Result<()> {
        let dir = self.layout.debug(split).join(&pv.volume_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let save = |img: &image::RgbImage, path: PathBuf| {
            img.save(&path).map_err(|e| Error::Image {
                path: path.clone(),
                message: e.to_string(),
            })
        };
        for (i, (s, c)) in slices.iter().zip(coarse).enumerate() {
            save(&render_overlay(s, c), dir.join(format!("overlay_{i:05}.png")))?;
        }
        let m = &self.cfg.model;
        let set = crate::select::resample_train(
            &pv.selection,
            m.frames,
            &mut ChaCha8Rng::seed_from_u64(self.cfg.seed),
        );
        let raw: Vec<_> = set
            .indices
            .iter()
            .map(|&i| pv.frame(i).map(|f| f.to_f32()))
            .collect::<Result<_>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let frames = augment_clip(&raw, &self.cfg.classifier.augment, m.crop_size, &mut rng)?;
        save(&clip_grid(&frames, 8), dir.join("train_clip.png"))
    }

    fn train_classifier(&self) -> Result<Vec<PathBuf>> {
        let d = &self.cfg.data;
        self.require(&self.layout.prepared(d.train_split), Stage::Segment)?;
        self.require(&self.layout.prepared(d.val_split), Stage::Segment)?;
        let train = DiskVolumes::open(&self.layout.prepared(d.train_split))?;
        let val = DiskVolumes::open(&self.layout.prepared(d.val_split))?;
        let trained = train_classifier(&train, &val, &self.cfg.model, &self.cfg.classifier, &self.device)?;
        let ckpt = self.layout.classifier();
        ensure_parent(&ckpt)?;
        trained.model.save(&ckpt, &self.cfg.fingerprint())?;
        let log_path = self.layout.log("classifier");
        write_training_log(&log_path, &trained.log)?;
        log::info!(
            "best validation accuracy {:.4} at epoch {}",
            trained.best_val_acc,
            trained.best_epoch
        );
        Ok(vec![ckpt, log_path])
    }

    fn load_classifier(&self) -> Result<Classifier3d> {
        self.require(&self.layout.classifier(), Stage::TrainClassifier)?;
        let (model, fp) = Classifier3d::load(&self.layout.classifier(), &self.device)?;
        if fp != self.cfg.fingerprint() {
            log::warn!("classifier checkpoint was trained under a different configuration");
        }
        Ok(model)
    }

    fn prepared_splits(&self) -> Result<Vec<Split>> {
        self.require(&self.layout.prepared(self.cfg.data.train_split), Stage::Segment)?;
        Ok(self
            .splits()
            .into_iter()
            .filter(|&s| self.layout.prepared(s).exists())
            .collect())
    }

    fn augmented_records(&self, pv: &PreparedVolume, model: &Classifier3d, seed: u64) -> Result<Vec<EmbeddingRecord>> {
        let m = model.config();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        crate::select::resample_test(&pv.selection, m.frames)
            .into_iter()
            .enumerate()
            .map(|(i, set)| {
                let raw: Vec<_> = set
                    .indices
                    .iter()
                    .map(|&k| pv.frame(k).map(|f| f.to_f32()))
                    .collect::<Result<_>>()?;
                let clip = Clip::from_frames(&augment_clip(&raw, &self.cfg.classifier.augment, m.crop_size, &mut rng)?)?;
                let (_, embedding) = model.predict_clip(&clip)?;
                Ok(EmbeddingRecord {
                    volume_id: pv.volume_id.clone(),
                    set_index: i as i32,
                    label: pv.label,
                    embedding,
                })
            })
            .collect()
    }

    fn extract_features(&self) -> Result<Vec<PathBuf>> {
        let splits = self.prepared_splits()?;
        let model = self.load_classifier()?;
        let mut produced = Vec::new();
        for split in splits {
            let volumes = DiskVolumes::open(&self.layout.prepared(split))?;
            let path = self.layout.features(split);
            ensure_parent(&path)?;
            let mut writer = FeatureCacheWriter::create(&path)?;
            let augment = self.cfg.features.augment && split != self.cfg.data.test_split;
            for i in 0..volumes.len() {
                let pv = volumes.load(i)?;
                let records = if augment {
                    self.augmented_records(&pv, &model, self.cfg.seed.wrapping_add(i as u64))?
                } else {
                    extract_features(&pv, &model)?
                };
                for r in &records {
                    writer.append(r)?;
                }
            }
            let n = writer.finish()?;
            log::info!("{split}: {n} embedding records");
            produced.push(path);
        }
        Ok(produced)
    }

    fn split_vectors(&self, split: Split, pooling: Pooling) -> Result<Vec<VolumeVector>> {
        let path = self.layout.features(split);
        self.require(&path, Stage::ExtractFeatures)?;
        volume_vectors(&read_feature_cache(&path)?, pooling)
    }

    fn train_mlp(&self) -> Result<Vec<PathBuf>> {
        let d = &self.cfg.data;
        let train = self.split_vectors(d.train_split, self.cfg.mlp.pooling)?;
        let val = self.split_vectors(d.val_split, self.cfg.mlp.pooling)?;
        let trained = train_mlp(&train, &val, &self.cfg.mlp, &self.device)?;
        let ckpt = self.layout.mlp();
        ensure_parent(&ckpt)?;
        trained.mlp.save(&ckpt, &self.cfg.fingerprint(), &self.cfg.mlp)?;
        let log_path = self.layout.log("mlp");
        write_csv(&log_path, &trained.log, &["epoch", "lr", "train_loss", "val_loss", "val_acc"])?;
        Ok(vec![ckpt, log_path])
    }

    fn bert_predictions(&self, split: Split, model: &Classifier3d) -> Result<Vec<(VolumePrediction, Option<Label>)>> {
        let dir = self.layout.prepared(split);
        self.require(&dir, Stage::Segment)?;
        let volumes = DiskVolumes::open(&dir)?;
        let m = model.config();
        (0..volumes.len())
            .map(|i| {
                let pv = volumes.load(i)?;
                let clips: Vec<Clip> = test_clips(&pv, m.frames, m.crop_size)?
                    .into_iter()
                    .map(|(_, c)| c)
                    .collect();
                Ok((predict_volume(&pv.volume_id, &clips, model, self.cfg.classifier.batch_size)?, pv.label))
            })
            .collect()
    }

    fn mlp_predictions(&self, split: Split, mlp: &Mlp, pooling: Pooling) -> Result<Vec<(PredictionRow, Option<usize>)>> {
        self.split_vectors(split, pooling)?
            .into_iter()
            .map(|v| {
                let prob = softmax2(mlp_forward(&v.vector, mlp)?);
                Ok((prediction_row(&v.volume_id, prob, PredictLevel::Mlp), v.class))
            })
            .collect()
    }

    fn skipped_ids(&self, split: Split) -> Result<Vec<String>> {
        let path = self.layout.skipped(split);
        if !path.exists() {
            return Ok(Vec::new());
        }
        let mut r = csv::Reader::from_path(&path).map_err(|e| Error::format(&path, e.to_string()))?;
        r.deserialize::<SkippedVolume>()
            .map(|row| row.map(|s| s.volume_id).map_err(|e| Error::format(&path, e.to_string())))
            .collect()
    }

    fn score(&self, rows: &[(PredictionRow, Option<usize>)]) -> Result<Option<MetricsReport>> {
        if rows.is_empty() || rows.iter().any(|(_, c)| c.is_none()) {
            return Ok(None);
        }
        let preds: Vec<(String, usize)> = rows
            .iter()
            .map(|(r, _)| (r.volume_id.clone(), r.pred.class_index().unwrap_or(0)))
            .collect();
        let labels: Vec<(String, usize)> = rows
            .iter()
            .map(|(r, c)| (r.volume_id.clone(), c.expect("checked")))
            .collect();
        evaluate(&preds, &labels).map(Some)
    }

    fn evaluate(&self) -> Result<Vec<PathBuf>> {
        let model = self.load_classifier()?;
        let mlp = if self.layout.mlp().exists() {
            Some(Mlp::load(&self.layout.mlp(), &self.device)?)
        } else {
            log::warn!("no MLP checkpoint; evaluating the first level only");
            None
        };
        let mut produced = Vec::new();
        let d = &self.cfg.data;
        for split in [d.val_split, d.test_split] {
            if !self.layout.prepared(split).exists() {
                continue;
            }
            let skipped = self.skipped_ids(split)?;
            let mut levels = Vec::new();
            let bert: Vec<(PredictionRow, Option<usize>)> = self
                .bert_predictions(split, &model)?
                .into_iter()
                .map(|(p, l)| {
                    (
                        prediction_row(&p.volume_id, p.aggregate_prob, PredictLevel::Bert),
                        l.and_then(|l| l.class_index()),
                    )
                })
                .collect();
            levels.push((PredictLevel::Bert, bert));
            if let Some((mlp, mcfg, _)) = &mlp {
                if self.layout.features(split).exists() {
                    levels.push((PredictLevel::Mlp, self.mlp_predictions(split, mlp, mcfg.pooling)?));
                }
            }
            let mut reports = Vec::new();
            for (level, rows) in &levels {
                let path = self.layout.predictions(split, *level);
                let plain: Vec<&PredictionRow> = rows.iter().map(|(r, _)| r).collect();
                write_csv(&path, &plain, &PREDICTION_HEADER)?;
                produced.push(path);
                if let Some(metrics) = self.score(rows)? {
                    log::info!(
                        "{split} {}: accuracy {:.4} macro-F1 {:.4}",
                        level.as_str(),
                        metrics.accuracy,
                        metrics.macro_f1
                    );
                    reports.push(LevelMetrics {
                        level: level.as_str().to_string(),
                        volumes: rows.len(),
                        skipped: skipped.clone(),
                        metrics,
                    });
                }
            }
            if !reports.is_empty() {
                let path = self.layout.metrics(split);
                write_json(&path, &reports)?;
                produced.push(path);
            }
        }
        if self.cfg.mlp_grid {
            produced.push(self.run_mlp_grid()?);
        }
        Ok(produced)
    }

    /// Train every pooling × activation head on the cached features.
    fn run_mlp_grid(&self) -> Result<PathBuf> {
        let d = &self.cfg.data;
        let mut entries = Vec::new();
        for pooling in Pooling::ALL {
            let train = self.split_vectors(d.train_split, pooling)?;
            let val = self.split_vectors(d.val_split, pooling)?;
            for activation in Activation::ALL {
                let cfg = MlpConfig {
                    pooling,
                    activation,
                    ..self.cfg.mlp.clone()
                };
                let t = train_mlp(&train, &val, &cfg, &self.device)?;
                entries.push(GridEntry {
                    pooling,
                    activation,
                    lr: cfg.effective_lr(),
                    best_epoch: t.best_epoch,
                    val_acc: t.best_val_acc,
                });
            }
        }
        let path = self.layout.mlp_grid();
        write_json(&path, &entries)?;
        Ok(path)
    }

    fn predict(&self) -> Result<Vec<PathBuf>> {
        let split = self.cfg.data.test_split;
        let model = self.load_classifier()?;
        let level = self.cfg.predict_level;
        let rows: Vec<PredictionRow> = match level {
            PredictLevel::Bert => self
                .bert_predictions(split, &model)?
                .into_iter()
                .map(|(p, _)| prediction_row(&p.volume_id, p.aggregate_prob, level))
                .collect(),
            PredictLevel::Mlp => {
                self.require(&self.layout.mlp(), Stage::TrainMlp)?;
                let (mlp, mcfg, _) = Mlp::load(&self.layout.mlp(), &self.device)?;
                self.mlp_predictions(split, &mlp, mcfg.pooling)?
                    .into_iter()
                    .map(|(r, _)| r)
                    .collect()
            }
        };
        let path = self.layout.predictions(split, level);
        write_csv(&path, &rows, &PREDICTION_HEADER)?;
        Ok(vec![path])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("train".parse::<Stage>().is_err());
    }

    #[test]
    fn predict_without_classifier() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            output_dir: dir.path().to_path_buf(),
            ..RunConfig::default()
        };
        let err = Pipeline::new(cfg, false).run(Stage::Predict).unwrap_err();
        assert!(err.to_string().contains("run train-classifier first"), "{err}");
    }

    #[test]
    fn mask_png_is_one_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let m = Mask::from_fn(10, 3, |x, y| (x + y) % 2 == 0);
        write_mask_png(&path, &m).unwrap();
        let dec = png::Decoder::new(std::io::BufReader::new(fs::File::open(&path).unwrap()));
        let reader = dec.read_info().unwrap();
        assert_eq!(reader.info().bit_depth, png::BitDepth::One);
    }
}
