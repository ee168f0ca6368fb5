//! Three-channel input composition (raw slice, mask, masked lung), optional bbox
//! cropping, and the train/eval spatial transforms that produce fixed-size clips.

use std::fmt;
use std::str::FromStr;

use image::{GrayImage, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{resize_planar, BBox, Mask, Planar};

/// Network input side length.
pub const CROP_SIZE: u32 = 224;
/// Per-channel standardization applied after scaling to `[0, 1]`.
pub const NORM_MEAN: f32 = 0.45;
pub const NORM_STD: f32 = 0.225;
/// Multi-scale crop scale set, relative to the shorter side.
pub const MSC_SCALES: [f64; 4] = [1.0, 0.875, 0.75, 0.66];
const MSC_MAX_DISTORT: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Channel {
    R,
    M,
    L,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ChannelSpec(pub [Channel; 3]);

impl ChannelSpec {
    pub const RML: ChannelSpec = ChannelSpec([Channel::R, Channel::M, Channel::L]);
}

impl Default for ChannelSpec {
    fn default() -> Self {
        ChannelSpec::RML
    }
}

impl fmt::Display for ChannelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in self.0 {
            write!(f, "{c:?}")?;
        }
        Ok(())
    }
}

impl FromStr for ChannelSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let chans: Vec<Channel> = s
            .chars()
            .map(|c| match c.to_ascii_uppercase() {
                'R' => Ok(Channel::R),
                'M' => Ok(Channel::M),
                'L' => Ok(Channel::L),
                other => Err(Error::Config(format!("unknown channel `{other}` in `{s}`"))),
            })
            .collect::<Result<_>>()?;
        let arr: [Channel; 3] = chans
            .try_into()
            .map_err(|_| Error::Config(format!("channel spec `{s}` must have 3 entries")))?;
        Ok(ChannelSpec(arr))
    }
}

impl Serialize for ChannelSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ChannelSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Build the 3-channel raster named by `spec`; the mask renders as {0, 255}.
pub fn compose_rml(r: &GrayImage, m: &Mask, l: &GrayImage, spec: ChannelSpec) -> Result<Planar<u8>> {
    if r.dimensions() != m.dims() || r.dimensions() != l.dimensions() {
        return Err(Error::Shape(format!(
            "R {:?}, M {:?}, L {:?} differ",
            r.dimensions(),
            m.dims(),
            l.dimensions()
        )));
    }
    let (w, h) = r.dimensions();
    let mut data = Vec::with_capacity(3 * (w * h) as usize);
    for c in spec.0 {
        match c {
            Channel::R => data.extend_from_slice(r.as_raw()),
            Channel::L => data.extend_from_slice(l.as_raw()),
            Channel::M => data.extend(m.as_slice().iter().map(|&b| if b { 255u8 } else { 0 })),
        }
    }
    Planar::from_vec(3, w, h, data)
}

pub fn crop_bbox<T: Copy + Default>(img: &Planar<T>, bbox: BBox) -> Result<Planar<T>> {
    if bbox.x1 > img.width() || bbox.y1 > img.height() || bbox.x0 >= bbox.x1 || bbox.y0 >= bbox.y1 {
        return Err(Error::Shape(format!(
            "bbox {bbox:?} outside {}x{} image",
            img.width(),
            img.height()
        )));
    }
    let mut data = Vec::with_capacity(img.channels() * (bbox.width() * bbox.height()) as usize);
    for c in 0..img.channels() {
        let plane = img.plane(c);
        for y in bbox.y0..bbox.y1 {
            let row = (y * img.width()) as usize;
            data.extend_from_slice(&plane[row + bbox.x0 as usize..row + bbox.x1 as usize]);
        }
    }
    Planar::from_vec(img.channels(), bbox.width(), bbox.height(), data)
}

fn default_rotation() -> f64 {
    10.0
}
fn default_scale_range() -> [f64; 2] {
    [0.8, 1.2]
}
fn default_translate() -> f64 {
    0.1
}
fn default_shear() -> f64 {
    10.0
}
fn default_brightness() -> f64 {
    0.5
}
fn default_contrast() -> f64 {
    0.3
}
fn default_enlarge() -> f64 {
    0.25
}
fn default_hflip() -> f64 {
    0.5
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    #[serde(default = "default_rotation")]
    pub rotation_deg: f64,
    #[serde(default = "default_scale_range")]
    pub scale_range: [f64; 2],
    #[serde(default = "default_translate")]
    pub translate_frac: f64,
    #[serde(default = "default_shear")]
    pub shear_deg: f64,
    #[serde(default = "default_brightness")]
    pub brightness: f64,
    #[serde(default = "default_contrast")]
    pub contrast: f64,
    #[serde(default = "default_enlarge")]
    pub enlarge_frac: f64,
    #[serde(default = "default_hflip")]
    pub hflip_prob: f64,
    #[serde(default)]
    pub use_affine: bool,
    #[serde(default = "default_true")]
    pub use_msc: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_deg: default_rotation(),
            scale_range: default_scale_range(),
            translate_frac: default_translate(),
            shear_deg: default_shear(),
            brightness: default_brightness(),
            contrast: default_contrast(),
            enlarge_frac: default_enlarge(),
            hflip_prob: default_hflip(),
            use_affine: false,
            use_msc: true,
        }
    }
}

impl AugmentConfig {
    /// Every random range collapsed; only resize and crop remain.
    pub fn identity() -> Self {
        AugmentConfig {
            rotation_deg: 0.0,
            scale_range: [1.0, 1.0],
            translate_frac: 0.0,
            shear_deg: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            hflip_prob: 0.0,
            use_affine: false,
            use_msc: false,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub angle_deg: f64,
    pub scale: f64,
    /// Translation in pixels.
    pub tx: f64,
    pub ty: f64,
    pub shear_deg: f64,
    pub brightness: f64,
    pub contrast: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

/// Transform parameters sampled once per clip.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentParams {
    pub affine: Option<AffineParams>,
    /// Size after enlarging the shorter side.
    pub resized: (u32, u32),
    /// Crop window in the resized image; scaled to the output size when not square-exact.
    pub crop: CropWindow,
    pub flip: bool,
}

fn enlarged_dims(width: u32, height: u32, out: u32, enlarge: f64) -> (u32, u32) {
    let target = (out as f64 * (1.0 + enlarge)).round();
    let s = target / width.min(height) as f64;
    (
        ((width as f64 * s).round() as u32).max(out),
        ((height as f64 * s).round() as u32).max(out),
    )
}

fn center_window(w: u32, h: u32, out: u32) -> CropWindow {
    CropWindow {
        x: ((w - out) as f64 / 2.0).round() as u32,
        y: ((h - out) as f64 / 2.0).round() as u32,
        width: out,
        height: out,
    }
}

fn check_size(width: u32, height: u32, out: u32) -> Result<()> {
    if width < out || height < out {
        return Err(Error::Shape(format!(
            "input {width}x{height} smaller than {out}x{out}"
        )));
    }
    Ok(())
}

pub fn sample_augment<R: Rng + ?Sized>(
    cfg: &AugmentConfig,
    width: u32,
    height: u32,
    out: u32,
    rng: &mut R,
) -> Result<AugmentParams> {
    check_size(width, height, out)?;
    let mut uniform = |lo: f64, hi: f64| if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let affine = cfg.use_affine.then(|| AffineParams {
        angle_deg: uniform(-cfg.rotation_deg, cfg.rotation_deg),
        scale: uniform(cfg.scale_range[0], cfg.scale_range[1]),
        tx: uniform(-cfg.translate_frac, cfg.translate_frac) * width as f64,
        ty: uniform(-cfg.translate_frac, cfg.translate_frac) * height as f64,
        shear_deg: uniform(-cfg.shear_deg, cfg.shear_deg),
        brightness: uniform(1.0 - cfg.brightness, 1.0 + cfg.brightness).max(0.0),
        contrast: uniform(1.0 - cfg.contrast, 1.0 + cfg.contrast).max(0.0),
    });
    let (rw, rh) = enlarged_dims(width, height, out, cfg.enlarge_frac);
    let crop = if cfg.use_msc {
        let base = rw.min(rh) as f64;
        let sizes: Vec<u32> = MSC_SCALES.iter().map(|s| (base * s) as u32).collect();
        let mut pairs = Vec::new();
        for (i, &cw) in sizes.iter().enumerate() {
            for (j, &ch) in sizes.iter().enumerate() {
                if i.abs_diff(j) <= MSC_MAX_DISTORT {
                    pairs.push((cw, ch));
                }
            }
        }
        let (cw, ch) = pairs[rng.gen_range(0..pairs.len())];
        let (ws, hs) = ((rw - cw) / 4, (rh - ch) / 4);
        let offsets = [(0, 0), (4 * ws, 0), (0, 4 * hs), (4 * ws, 4 * hs), (2 * ws, 2 * hs)];
        let (x, y) = offsets[rng.gen_range(0..offsets.len())];
        CropWindow {
            x,
            y,
            width: cw,
            height: ch,
        }
    } else {
        center_window(rw, rh, out)
    };
    let flip = cfg.hflip_prob > 0.0 && rng.gen_bool(cfg.hflip_prob.min(1.0));
    Ok(AugmentParams {
        affine,
        resized: (rw, rh),
        crop,
        flip,
    })
}

/// Inverse-mapped affine warp about the image center, bilinear, zero fill.
fn warp_affine(img: &Planar<f32>, p: &AffineParams) -> Planar<f32> {
    let (w, h) = (img.width(), img.height());
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (sin, cos) = p.angle_deg.to_radians().sin_cos();
    let sh = p.shear_deg.to_radians().tan();
    // forward = scale · R · [[1, sh], [0, 1]]
    let a = [
        [p.scale * cos, p.scale * (cos * sh - sin)],
        [p.scale * sin, p.scale * (sin * sh + cos)],
    ];
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let inv = [
        [a[1][1] / det, -a[0][1] / det],
        [-a[1][0] / det, a[0][0] / det],
    ];
    let mut out = Planar::<f32>::new(img.channels(), w, h);
    for c in 0..img.channels() {
        let src = img.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let dx = x as f64 - cx - p.tx;
                let dy = y as f64 - cy - p.ty;
                let sx = inv[0][0] * dx + inv[0][1] * dy + cx;
                let sy = inv[1][0] * dx + inv[1][1] * dy + cy;
                dst[(y * w + x) as usize] = sample_bilinear(src, w, h, sx, sy);
            }
        }
    }
    out
}

fn sample_bilinear(src: &[f32], w: u32, h: u32, x: f64, y: f64) -> f32 {
    if x < 0.0 || y < 0.0 || x > (w - 1) as f64 || y > (h - 1) as f64 {
        return 0.0;
    }
    let (x0, y0) = (x.floor() as u32, y.floor() as u32);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
    let at = |xx: u32, yy: u32| src[(yy * w + xx) as usize];
    let top = at(x0, y0) + (at(x1, y0) - at(x0, y0)) * fx;
    let bot = at(x0, y1) + (at(x1, y1) - at(x0, y1)) * fx;
    top + (bot - top) * fy
}

fn jitter_intensity(img: &mut Planar<f32>, brightness: f64, contrast: f64) {
    let n = img.as_slice().len().max(1);
    let mean = img.as_slice().iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    for c in 0..img.channels() {
        for v in img.plane_mut(c) {
            let b = *v as f64 * brightness;
            let out = (b - mean * brightness) * contrast + mean * brightness;
            *v = out.clamp(0.0, 255.0) as f32;
        }
    }
}

fn crop_planar(img: &Planar<f32>, win: CropWindow) -> Planar<f32> {
    crop_bbox(
        img,
        BBox::new(win.x, win.y, win.x + win.width, win.y + win.height),
    )
    .expect("crop window inside image")
}

fn flip_horizontal(img: &mut Planar<f32>) {
    let (w, h) = (img.width() as usize, img.height() as usize);
    for c in 0..img.channels() {
        let plane = img.plane_mut(c);
        for y in 0..h {
            plane[y * w..(y + 1) * w].reverse();
        }
    }
}

/// Apply previously sampled parameters; output is `out`×`out`.
pub fn apply_augment(img: &Planar<f32>, params: &AugmentParams, out: u32) -> Result<Planar<f32>> {
    check_size(img.width(), img.height(), out)?;
    let mut cur = match &params.affine {
        Some(a) => {
            let mut warped = warp_affine(img, a);
            jitter_intensity(&mut warped, a.brightness, a.contrast);
            warped
        }
        None => img.clone(),
    };
    cur = resize_planar(&cur, params.resized.0, params.resized.1);
    cur = crop_planar(&cur, params.crop);
    if cur.width() != out || cur.height() != out {
        cur = resize_planar(&cur, out, out);
    }
    if params.flip {
        flip_horizontal(&mut cur);
    }
    Ok(cur)
}

pub fn augment_train<R: Rng + ?Sized>(
    img: &Planar<f32>,
    cfg: &AugmentConfig,
    out: u32,
    rng: &mut R,
) -> Result<Planar<f32>> {
    let params = sample_augment(cfg, img.width(), img.height(), out, rng)?;
    apply_augment(img, &params, out)
}

/// One parameter draw shared by every frame of the clip.
pub fn augment_clip<R: Rng + ?Sized>(
    frames: &[Planar<f32>],
    cfg: &AugmentConfig,
    out: u32,
    rng: &mut R,
) -> Result<Vec<Planar<f32>>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Empty("clip has no frames".into()))?;
    let params = sample_augment(cfg, first.width(), first.height(), out, rng)?;
    frames.iter().map(|f| apply_augment(f, &params, out)).collect()
}

/// Enlarge the shorter side by 25% and take the central `out`×`out` window.
pub fn transform_eval(img: &Planar<f32>, out: u32) -> Result<Planar<f32>> {
    check_size(img.width(), img.height(), out)?;
    let (rw, rh) = enlarged_dims(img.width(), img.height(), out, default_enlarge());
    let resized = resize_planar(img, rw, rh);
    Ok(crop_planar(&resized, center_window(rw, rh, out)))
}

/// Normalized network input: `frames × 3 × size × size`, frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub frames: usize,
    pub size: u32,
    pub data: Vec<f32>,
}

impl Clip {
    /// Scale 0–255 frames to `[0, 1]` and standardize.
    pub fn from_frames(frames: &[Planar<f32>]) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Empty("clip has no frames".into()))?;
        let size = first.width();
        let mut data = Vec::with_capacity(frames.len() * 3 * (size * size) as usize);
        for f in frames {
            if f.channels() != 3 || f.width() != size || f.height() != size {
                return Err(Error::Shape(format!(
                    "frame {}x{}x{} in a {size}x{size} clip",
                    f.channels(),
                    f.height(),
                    f.width()
                )));
            }
            data.extend(
                f.as_slice()
                    .iter()
                    .map(|&v| (v / 255.0 - NORM_MEAN) / NORM_STD),
            );
        }
        Ok(Clip {
            frames: frames.len(),
            size,
            data,
        })
    }

    pub fn zeros(frames: usize, size: u32) -> Self {
        Clip {
            frames,
            size,
            data: vec![0.0; frames * 3 * (size * size) as usize],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.frames, 3, self.size as usize, self.size as usize)
    }
}

/// Tile frames (first channel shown as gray, or all three as RGB) into a grid for inspection.
pub fn clip_grid(frames: &[Planar<f32>], columns: usize) -> RgbImage {
    let (fw, fh) = frames
        .first()
        .map(|f| (f.width(), f.height()))
        .unwrap_or((0, 0));
    let cols = columns.max(1).min(frames.len().max(1));
    let rows = frames.len().div_ceil(cols);
    let mut out = RgbImage::new(fw * cols as u32, fh * rows as u32);
    for (i, f) in frames.iter().enumerate() {
        let (ox, oy) = ((i % cols) as u32 * fw, (i / cols) as u32 * fh);
        for y in 0..fh {
            for x in 0..fw {
                let px = |c: usize| f.get(c.min(f.channels() - 1), x, y).clamp(0.0, 255.0) as u8;
                out.put_pixel(ox + x, oy + y, image::Rgb([px(0), px(1), px(2)]));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gray(w: u32, h: u32, f: impl Fn(u32, u32) -> u8) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| image::Luma([f(x, y)]))
    }

    #[test]
    fn rml_pixels() {
        let r = gray(2, 1, |_, _| 100);
        let m = Mask::from_fn(2, 1, |x, _| x == 0);
        let l = gray(2, 1, |x, _| if x == 0 { 100 } else { 0 });
        let out = compose_rml(&r, &m, &l, ChannelSpec::RML).unwrap();
        assert_eq!((out.get(0, 0, 0), out.get(1, 0, 0), out.get(2, 0, 0)), (100, 255, 100));
        assert_eq!((out.get(0, 1, 0), out.get(1, 1, 0), out.get(2, 1, 0)), (100, 0, 0));
        let rrr = compose_rml(&r, &m, &l, "RRR".parse().unwrap()).unwrap();
        assert!((0..3).all(|c| rrr.plane(c) == r.as_raw().as_slice()));
    }

    #[test]
    fn compose_rejects_mismatch() {
        let r = gray(4, 4, |_, _| 0);
        let l = gray(4, 3, |_, _| 0);
        assert!(compose_rml(&r, &Mask::new(4, 4), &l, ChannelSpec::RML).is_err());
    }

    #[test]
    fn spec_parsing() {
        assert_eq!("rml".parse::<ChannelSpec>().unwrap(), ChannelSpec::RML);
        assert_eq!(ChannelSpec::RML.to_string(), "RML");
        assert!("RM".parse::<ChannelSpec>().is_err());
        assert!("RXL".parse::<ChannelSpec>().is_err());
    }

    #[test]
    fn crop_examples() {
        let img = Planar::from_vec(1, 200, 200, (0..40000u32).map(|v| (v % 251) as u8).collect()).unwrap();
        assert_eq!(crop_bbox(&img, BBox::new(0, 0, 200, 200)).unwrap(), img);
        let c = crop_bbox(&img, BBox::new(10, 10, 110, 110)).unwrap();
        assert_eq!((c.width(), c.height()), (100, 100));
        assert_eq!(c.get(0, 0, 0), img.get(0, 10, 10));
        assert!(crop_bbox(&img, BBox::new(150, 150, 250, 250)).is_err());
    }

    #[test]
    fn eval_constant_and_center() {
        let c = Planar::from_vec(3, 512, 512, vec![77.0; 3 * 512 * 512]).unwrap();
        let out = transform_eval(&c, CROP_SIZE).unwrap();
        assert_eq!((out.width(), out.height(), out.channels()), (224, 224, 3));
        assert!(out.as_slice().iter().all(|&v| (v - 77.0).abs() < 1e-4));

        let g = Planar::from_vec(1, 280, 280, (0..280 * 280).map(|v| v as f32).collect()).unwrap();
        let out = transform_eval(&g, CROP_SIZE).unwrap();
        assert_eq!(out.get(0, 0, 0), g.get(0, 28, 28));
        assert_eq!(out.get(0, 223, 223), g.get(0, 251, 251));
    }

    #[test]
    fn undersized_rejected() {
        let small = Planar::<f32>::new(3, 100, 300);
        assert!(transform_eval(&small, CROP_SIZE).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(augment_train(&small, &AugmentConfig::default(), CROP_SIZE, &mut rng).is_err());
    }

    #[test]
    fn identity_config_matches_eval() {
        let img = Planar::from_vec(
            3,
            300,
            260,
            (0..3 * 300 * 260).map(|v| ((v * 31) % 255) as f32).collect(),
        )
        .unwrap();
        let mut cfg = AugmentConfig::identity();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = augment_train(&img, &cfg, CROP_SIZE, &mut rng).unwrap();
        assert_eq!(a, transform_eval(&img, CROP_SIZE).unwrap());
        // an identity affine is exact too
        cfg.use_affine = true;
        let b = augment_train(&img, &cfg, CROP_SIZE, &mut rng).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn seeded_augment_is_reproducible() {
        let img = Planar::from_vec(3, 256, 256, (0..3 * 256 * 256).map(|v| (v % 256) as f32).collect()).unwrap();
        let cfg = AugmentConfig {
            use_affine: true,
            ..Default::default()
        };
        let a = augment_train(&img, &cfg, CROP_SIZE, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = augment_train(&img, &cfg, CROP_SIZE, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }
}
