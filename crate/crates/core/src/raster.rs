//! Raster containers shared by the preprocessing stages.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side length every slice is normalized to on ingest.
pub const SLICE_SIZE: u32 = 512;

/// Axis-aligned half-open rectangle `[x0, x1) × [y0, y1)` in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        debug_assert!(x0 <= x1 && y0 <= y1);
        BBox { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn union(&self, other: &BBox) -> BBox {
        BBox {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }

    pub fn contains_point(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// Binary raster, row-major.
#[derive(Clone, PartialEq, Eq)]
pub struct Mask {
    width: u32,
    height: u32,
    data: Vec<bool>,
}

impl std::fmt::Debug for Mask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Mask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("count", &self.count())
            .finish()
    }
}

impl Mask {
    pub fn new(width: u32, height: u32) -> Self {
        Mask {
            width,
            height,
            data: vec![false; (width * height) as usize],
        }
    }

    pub fn filled(width: u32, height: u32, value: bool) -> Self {
        Mask {
            width,
            height,
            data: vec![value; (width * height) as usize],
        }
    }

    pub fn from_vec(width: u32, height: u32, data: Vec<bool>) -> Result<Self> {
        if data.len() != (width * height) as usize {
            return Err(Error::Shape(format!(
                "mask buffer of {} pixels for {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Mask {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let mut data = Vec::with_capacity((width * height) as usize);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Mask {
            width,
            height,
            data,
        }
    }

    /// Nonzero pixels of an 8-bit image are set.
    pub fn from_gray(img: &image::GrayImage) -> Self {
        Mask {
            width: img.width(),
            height: img.height(),
            data: img.as_raw().iter().map(|&v| v != 0).collect(),
        }
    }

    /// Set pixels render as 255, unset as 0.
    pub fn to_gray(&self) -> image::GrayImage {
        let raw = self.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
        image::GrayImage::from_raw(self.width, self.height, raw).expect("buffer size")
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[(y * self.width + x) as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        self.data[(y * self.width + x) as usize] = v;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [bool] {
        &mut self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn invert(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&b| !b).collect(),
        }
    }

    /// Tight bounding box of the set pixels, `None` when empty.
    pub fn bbox(&self) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
        let mut any = false;
        for y in 0..self.height {
            let row = &self.data[(y * self.width) as usize..((y + 1) * self.width) as usize];
            for (x, &b) in row.iter().enumerate() {
                if b {
                    let x = x as u32;
                    any = true;
                    x0 = x0.min(x);
                    x1 = x1.max(x + 1);
                    y0 = y0.min(y);
                    y1 = y1.max(y + 1);
                }
            }
        }
        any.then(|| BBox::new(x0, y0, x1, y1))
    }

    /// True if any set pixel lies on the outermost row or column.
    pub fn touches_border(&self) -> bool {
        let (w, h) = (self.width, self.height);
        if w == 0 || h == 0 {
            return false;
        }
        (0..w).any(|x| self.get(x, 0) || self.get(x, h - 1))
            || (0..h).any(|y| self.get(0, y) || self.get(w - 1, y))
    }
}

/// Channel-major multi-channel raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Planar<T> {
    channels: usize,
    width: u32,
    height: u32,
    data: Vec<T>,
}

impl<T: Copy + Default> Planar<T> {
    pub fn new(channels: usize, width: u32, height: u32) -> Self {
        Planar {
            channels,
            width,
            height,
            data: vec![T::default(); channels * (width * height) as usize],
        }
    }

    pub fn from_vec(channels: usize, width: u32, height: u32, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * (width * height) as usize {
            return Err(Error::Shape(format!(
                "planar buffer of {} values for {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        Ok(Planar {
            channels,
            width,
            height,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = (self.width * self.height) as usize;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [T] {
        let n = (self.width * self.height) as usize;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, x: u32, y: u32) -> T {
        let n = (self.width * self.height) as usize;
        self.data[c * n + (y * self.width + x) as usize]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }
}

impl Planar<u8> {
    pub fn to_f32(&self) -> Planar<f32> {
        Planar {
            channels: self.channels,
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }
}

/// Bilinear resize of one plane with half-pixel centers and edge clamping.
pub fn resize_bilinear(src: &[f32], width: u32, height: u32, out_w: u32, out_h: u32) -> Vec<f32> {
    assert_eq!(src.len(), (width * height) as usize);
    let xs = sample_axis(width, out_w);
    let ys = sample_axis(height, out_h);
    let w = width as usize;
    let mut out = Vec::with_capacity((out_w * out_h) as usize);
    for &(y0, y1, fy) in &ys {
        let r0 = &src[y0 * w..(y0 + 1) * w];
        let r1 = &src[y1 * w..(y1 + 1) * w];
        for &(x0, x1, fx) in &xs {
            let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
            let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
            out.push(top + (bot - top) * fy);
        }
    }
    out
}

fn sample_axis(len: u32, out_len: u32) -> Vec<(usize, usize, f32)> {
    let scale = len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(len as usize - 1);
            (i0, i1, (s - i0 as f64) as f32)
        })
        .collect()
}

/// Bilinear resize of every plane.
pub fn resize_planar(img: &Planar<f32>, out_w: u32, out_h: u32) -> Planar<f32> {
    if img.width == out_w && img.height == out_h {
        return img.clone();
    }
    let mut data = Vec::with_capacity(img.channels * (out_w * out_h) as usize);
    for c in 0..img.channels {
        data.extend(resize_bilinear(img.plane(c), img.width, img.height, out_w, out_h));
    }
    Planar {
        channels: img.channels,
        width: out_w,
        height: out_h,
        data,
    }
}

/// Bilinear resize of an 8-bit image, rounding to the nearest gray level.
pub fn resize_gray(img: &image::GrayImage, out_w: u32, out_h: u32) -> image::GrayImage {
    let src: Vec<f32> = img.as_raw().iter().map(|&v| v as f32).collect();
    let out = resize_bilinear(&src, img.width(), img.height(), out_w, out_h);
    let raw = out
        .into_iter()
        .map(|v| v.round().clamp(0.0, 255.0) as u8)
        .collect();
    image::GrayImage::from_raw(out_w, out_h, raw).expect("buffer size")
}

/// Soft Dice overlap `2|A∩B| / (|A|+|B|)`; two empty masks score 1.
pub fn dice(a: &Mask, b: &Mask) -> f64 {
    assert_eq!(a.dims(), b.dims());
    let inter = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .filter(|(&p, &q)| p && q)
        .count();
    let total = a.count() + b.count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}
