//! Per-volume preparation: coarse segmentation for slice selection, learned
//! masks for the M and L channels, and composed frames for the kept slices.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::compose::{compose_rml, crop_bbox, ChannelSpec};
use crate::error::{Error, Result};
use crate::ingest::{CtVolume, Label};
use crate::morph::{segment_morphological, volume_bbox, CoarseMask};
use crate::raster::Planar;
use crate::select::{resample_test, select_slices, SelectionResult, SelectionRow, MIN_KEEP, SET_LEN};
use crate::unet::{apply_mask, infer_masks, refine_mask, RefinedMask, SegModel, MASK_THRESHOLD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrepareOptions {
    #[serde(default)]
    pub channels: ChannelSpec,
    /// Crop every frame to the volume's body bounding box.
    #[serde(default)]
    pub crop_to_bbox: bool,
    #[serde(default = "default_min_keep")]
    pub min_keep: usize,
    /// Slices per segmentation forward pass.
    #[serde(default = "default_seg_batch")]
    pub seg_batch: usize,
}

fn default_min_keep() -> usize {
    MIN_KEEP
}
fn default_seg_batch() -> usize {
    4
}

impl Default for PrepareOptions {
    fn default() -> Self {
        PrepareOptions {
            channels: ChannelSpec::default(),
            crop_to_bbox: false,
            min_keep: MIN_KEEP,
            seg_batch: default_seg_batch(),
        }
    }
}

/// Composed frames of a volume's kept slices, ready for clip building.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedVolume {
    pub volume_id: String,
    pub label: Option<Label>,
    pub selection: SelectionResult,
    /// One 3-channel frame per entry of `selection.kept_indices`, same order.
    pub frames: Vec<Planar<u8>>,
}

impl PreparedVolume {
    /// Frame of volume slice `slice_index`, which must be a kept slice.
    pub fn frame(&self, slice_index: usize) -> Result<&Planar<u8>> {
        self.selection
            .kept_indices
            .binary_search(&slice_index)
            .map(|p| &self.frames[p])
            .map_err(|_| Error::InvalidData(format!("slice {slice_index} of {} was not kept", self.volume_id)))
    }
}

#[derive(Debug, Clone)]
pub struct PreparedOutput {
    pub volume: PreparedVolume,
    pub report: SelectionRow,
    pub coarse: Vec<CoarseMask>,
    /// Refined learned masks of the kept slices, keyed by slice index.
    pub masks: Vec<(usize, RefinedMask)>,
}

fn join<T: ToString>(v: impl IntoIterator<Item = T>) -> String {
    v.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn prepare_volume(vol: &CtVolume, seg: &SegModel, opts: &PrepareOptions) -> Result<PreparedOutput> {
    if vol.is_empty() {
        return Err(Error::Empty(format!("volume {} has no slices", vol.volume_id)));
    }
    let coarse: Vec<CoarseMask> = vol.slices.iter().map(segment_morphological).collect();
    let ratios: Vec<f64> = coarse.iter().map(|c| c.lung_ratio).collect();
    if ratios.iter().all(|&r| r == 0.0) {
        return Err(Error::Unsegmentable(format!("{}: no lung region on any slice", vol.volume_id)));
    }
    let selection = select_slices(&ratios, opts.min_keep)?;
    let bbox = volume_bbox(&coarse)?;

    let mut masks = Vec::with_capacity(selection.len());
    let mut frames = Vec::with_capacity(selection.len());
    for chunk in selection.kept_indices.chunks(opts.seg_batch.max(1)) {
        let slices: Vec<&GrayImage> = chunk.iter().map(|&i| &vol.slices[i]).collect();
        let probs = infer_masks(&slices, seg)?;
        for ((&i, slice), prob) in chunk.iter().zip(slices).zip(probs) {
            let refined = refine_mask(&prob.threshold(MASK_THRESHOLD));
            let lung = apply_mask(slice, &refined)?;
            let mut frame = compose_rml(slice, refined.mask(), &lung, opts.channels)?;
            if opts.crop_to_bbox {
                frame = crop_bbox(&frame, bbox)?;
            }
            frames.push(frame);
            masks.push((i, refined));
        }
    }
    let report = SelectionRow {
        volume_id: vol.volume_id.clone(),
        n_slices: vol.len(),
        n_kept: selection.len(),
        final_threshold: selection.final_threshold,
        n_test_sets: resample_test(&selection, SET_LEN).len(),
        kept: join(&selection.kept_indices),
        bbox: join([bbox.x0, bbox.y0, bbox.x1, bbox.y1]),
        ratios: join(&ratios),
    };
    Ok(PreparedOutput {
        volume: PreparedVolume {
            volume_id: vol.volume_id.clone(),
            label: vol.label,
            selection,
            frames,
        },
        report,
        coarse,
        masks,
    })
}

pub fn planar_to_rgb(p: &Planar<u8>) -> Result<RgbImage> {
    if p.channels() != 3 {
        return Err(Error::Shape(format!("{} channels, expected 3", p.channels())));
    }
    let (r, g, b) = (p.plane(0), p.plane(1), p.plane(2));
    let mut raw = Vec::with_capacity(3 * r.len());
    for i in 0..r.len() {
        raw.extend_from_slice(&[r[i], g[i], b[i]]);
    }
    Ok(RgbImage::from_raw(p.width(), p.height(), raw).expect("dims"))
}

pub fn rgb_to_planar(img: &RgbImage) -> Planar<u8> {
    let n = (img.width() * img.height()) as usize;
    let mut data = vec![0u8; 3 * n];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * n + i] = px.0[c];
        }
    }
    Planar::from_vec(3, img.width(), img.height(), data).expect("dims")
}

#[derive(Debug, Serialize, Deserialize)]
struct PreparedMeta {
    volume_id: String,
    label: Option<Label>,
    kept_indices: Vec<usize>,
    final_threshold: f64,
}

const META_FILE: &str = "volume.json";

fn frame_path(dir: &Path, slice_index: usize) -> PathBuf {
    dir.join(format!("{slice_index:05}.png"))
}

/// Write frames as RGB PNGs plus a metadata file into `dir`.
pub fn save_prepared(dir: &Path, pv: &PreparedVolume) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (&i, frame) in pv.selection.kept_indices.iter().zip(&pv.frames) {
        let path = frame_path(dir, i);
        planar_to_rgb(frame)?
            .save(&path)
            .map_err(|e| Error::Image {
                path: path.clone(),
                message: e.to_string(),
            })?;
    }
    let meta = PreparedMeta {
        volume_id: pv.volume_id.clone(),
        label: pv.label,
        kept_indices: pv.selection.kept_indices.clone(),
        final_threshold: pv.selection.final_threshold,
    };
    let path = dir.join(META_FILE);
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::format(&path, e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_prepared(dir: &Path) -> Result<PreparedVolume> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: PreparedMeta = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    let frames = meta
        .kept_indices
        .iter()
        .map(|&i| {
            let p = frame_path(dir, i);
            let img = image::open(&p).map_err(|e| Error::Image {
                path: p.clone(),
                message: e.to_string(),
            })?;
            Ok(rgb_to_planar(&img.to_rgb8()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedVolume {
        volume_id: meta.volume_id,
        label: meta.label,
        selection: SelectionResult {
            kept_indices: meta.kept_indices,
            final_threshold: meta.final_threshold,
        },
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_round_trip() {
        let p = Planar::from_vec(3, 2, 1, vec![1, 2, 3, 4, 5, 6]).unwrap();
        let rgb = planar_to_rgb(&p).unwrap();
        assert_eq!(rgb.as_raw(), &vec![1, 3, 5, 2, 4, 6]);
        assert_eq!(rgb_to_planar(&rgb), p);
    }

    #[test]
    fn frame_lookup() {
        let pv = PreparedVolume {
            volume_id: "v".into(),
            label: None,
            selection: SelectionResult {
                kept_indices: vec![2, 5],
                final_threshold: 0.7,
            },
            frames: vec![Planar::new(3, 1, 1), Planar::from_vec(3, 1, 1, vec![9, 9, 9]).unwrap()],
        };
        assert_eq!(pv.frame(5).unwrap().get(0, 0, 0), 9);
        assert!(pv.frame(3).is_err());
    }
}
