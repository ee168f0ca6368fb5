//! Classical lung segmentation: blur, Otsu binarization, opening, border
//! clearing, component filtering and hole filling.
//!
//! The coarse mask is used to measure how open the lungs are on a slice and to
//! bound the body; it is never fed to the classifier.

use std::collections::VecDeque;

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::raster::{BBox, Mask};

/// Components below this fraction of the image area are discarded.
pub const MIN_COMPONENT_FRACTION: f64 = 0.005;
const MAX_LUNG_COMPONENTS: usize = 2;
const OPEN_ITERATIONS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseMask {
    /// Retained lung components.
    pub mask: Mask,
    /// Everything not connected to the outside air, lungs included.
    pub body: Mask,
    /// `mask.count() / (width * height)`.
    pub lung_ratio: f64,
    /// Bounding box of `body`; absent iff `mask` is empty.
    pub bbox: Option<BBox>,
}

/// Binary structuring element with odd side lengths, centered.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructuringElement {
    size: usize,
    offsets: Vec<(i32, i32)>,
}

impl StructuringElement {
    /// Elliptical element inscribed in a `size`×`size` square, same raster rule as OpenCV.
    pub fn ellipse(size: usize) -> Self {
        assert!(size % 2 == 1, "structuring element side must be odd");
        let r = (size / 2) as i32;
        let c = r;
        let inv_r2 = if r > 0 { 1.0 / (r * r) as f64 } else { 0.0 };
        let mut offsets = Vec::new();
        for i in 0..size as i32 {
            let dy = i - r;
            let dx = (c as f64 * (((r * r - dy * dy) as f64) * inv_r2).sqrt()).round() as i32;
            let j1 = (c - dx).max(0);
            let j2 = (c + dx + 1).min(size as i32);
            for j in j1..j2 {
                offsets.push((j - c, dy));
            }
        }
        StructuringElement { size, offsets }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn contains(&self, dx: i32, dy: i32) -> bool {
        self.offsets.contains(&(dx, dy))
    }
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

#[inline]
fn reflect101(i: i64, n: i64) -> usize {
    if n == 1 {
        return 0;
    }
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
    }
    i as usize
}

/// Separable 5×5 Gaussian blur with σ = 1 and reflect-101 borders.
pub fn gaussian_blur(img: &GrayImage) -> GrayImage {
    gaussian_blur_with(img, 5, 1.0)
}

pub fn gaussian_blur_with(img: &GrayImage, size: usize, sigma: f64) -> GrayImage {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let k = gaussian_kernel(size, sigma);
    let r = (size / 2) as i64;
    let src = img.as_raw();
    let mut tmp = vec![0f64; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sx = reflect101(x + i as i64 - r, w);
                acc += kv * src[(y * w) as usize + sx] as f64;
            }
            tmp[(y * w + x) as usize] = acc;
        }
    }
    let mut out = Vec::with_capacity((w * h) as usize);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sy = reflect101(y + i as i64 - r, h);
                acc += kv * tmp[sy * w as usize + x as usize];
            }
            out.push(acc.round().clamp(0.0, 255.0) as u8);
        }
    }
    GrayImage::from_raw(img.width(), img.height(), out).expect("buffer size")
}

pub fn histogram(img: &GrayImage) -> [u64; 256] {
    let mut h = [0u64; 256];
    for &v in img.as_raw() {
        h[v as usize] += 1;
    }
    h
}

/// Otsu threshold `t` maximizing between-class variance for classes `≤ t` and `> t`.
/// Returns `None` when the histogram holds a single gray level. Ties resolve to the
/// smallest `t`.
pub fn otsu_threshold(hist: &[u64; 256]) -> Option<u8> {
    let total: u64 = hist.iter().sum();
    if total == 0 || hist.iter().filter(|&&c| c > 0).count() < 2 {
        return None;
    }
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0u64, 0f64);
    let mut best = (f64::NEG_INFINITY, 0u8);
    for t in 0..255usize {
        w0 += hist[t];
        sum0 += t as f64 * hist[t] as f64;
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let mu0 = sum0 / w0 as f64;
        let mu1 = (sum_all - sum0) / w1 as f64;
        let between = w0 as f64 * w1 as f64 * (mu0 - mu1).powi(2);
        if between > best.0 {
            best = (between, t as u8);
        }
    }
    Some(best.1)
}

/// Blur then Otsu-threshold; dark pixels (at or below the threshold) are foreground.
/// A single-level image is foreground iff its level is below mid-gray.
pub fn binarize(slice: &GrayImage) -> Mask {
    let blurred = gaussian_blur(slice);
    let (w, h) = blurred.dimensions();
    let data = match otsu_threshold(&histogram(&blurred)) {
        Some(t) => blurred.as_raw().iter().map(|&v| v <= t).collect(),
        None => blurred.as_raw().iter().map(|&v| v < 128).collect(),
    };
    Mask::from_vec(w, h, data).expect("dims")
}

/// Binary erosion; pixels outside the image do not erode.
pub fn erode(m: &Mask, se: &StructuringElement) -> Mask {
    morph_op(m, se, true)
}

/// Binary dilation; pixels outside the image do not dilate.
pub fn dilate(m: &Mask, se: &StructuringElement) -> Mask {
    morph_op(m, se, false)
}

fn morph_op(m: &Mask, se: &StructuringElement, erosion: bool) -> Mask {
    let (w, h) = (m.width() as i32, m.height() as i32);
    let mut out = Mask::new(m.width(), m.height());
    for y in 0..h {
        for x in 0..w {
            let mut v = erosion;
            for &(dx, dy) in &se.offsets {
                let (sx, sy) = (x + dx, y + dy);
                if sx < 0 || sy < 0 || sx >= w || sy >= h {
                    continue;
                }
                let p = m.get(sx as u32, sy as u32);
                if erosion && !p {
                    v = false;
                    break;
                }
                if !erosion && p {
                    v = true;
                    break;
                }
            }
            out.set(x as u32, y as u32, v);
        }
    }
    out
}

pub fn opening(m: &Mask, se: &StructuringElement, iterations: usize) -> Mask {
    let mut out = m.clone();
    for _ in 0..iterations {
        out = erode(&out, se);
    }
    for _ in 0..iterations {
        out = dilate(&out, se);
    }
    out
}

pub fn closing(m: &Mask, se: &StructuringElement, iterations: usize) -> Mask {
    let mut out = m.clone();
    for _ in 0..iterations {
        out = dilate(&out, se);
    }
    for _ in 0..iterations {
        out = erode(&out, se);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    fn offsets(&self) -> &'static [(i32, i32)] {
        match self {
            Connectivity::Four => &[(1, 0), (-1, 0), (0, 1), (0, -1)],
            Connectivity::Eight => &[
                (1, 0),
                (-1, 0),
                (0, 1),
                (0, -1),
                (1, 1),
                (1, -1),
                (-1, 1),
                (-1, -1),
            ],
        }
    }
}

/// Connected components of the set pixels. Returns a label image (0 = unset,
/// components numbered from 1 in raster-scan order) and each component's size.
pub fn label_components(m: &Mask, conn: Connectivity) -> (Vec<u32>, Vec<usize>) {
    let (w, h) = (m.width() as i32, m.height() as i32);
    let mut labels = vec![0u32; (w * h) as usize];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..(w * h) as usize {
        if !m.as_slice()[start] || labels[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        labels[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(p) = queue.pop_front() {
            size += 1;
            let (x, y) = ((p as i32) % w, (p as i32) / w);
            for &(dx, dy) in conn.offsets() {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w || ny >= h {
                    continue;
                }
                let q = (ny * w + nx) as usize;
                if m.as_slice()[q] && labels[q] == 0 {
                    labels[q] = id;
                    queue.push_back(q);
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Set pixels connected to the image border.
pub fn border_connected(m: &Mask, conn: Connectivity) -> Mask {
    let (labels, sizes) = label_components(m, conn);
    let mut touching = vec![false; sizes.len() + 1];
    let (w, h) = (m.width(), m.height());
    for y in 0..h {
        for x in 0..w {
            if x == 0 || y == 0 || x == w - 1 || y == h - 1 {
                touching[labels[(y * w + x) as usize] as usize] = true;
            }
        }
    }
    touching[0] = false;
    let data = labels.iter().map(|&l| touching[l as usize]).collect();
    Mask::from_vec(w, h, data).expect("dims")
}

/// Remove set components that touch the image border.
pub fn clear_border(m: &Mask) -> Mask {
    let outer = border_connected(m, Connectivity::Eight);
    let data = m
        .as_slice()
        .iter()
        .zip(outer.as_slice())
        .map(|(&a, &b)| a && !b)
        .collect();
    Mask::from_vec(m.width(), m.height(), data).expect("dims")
}

/// Set every unset pixel that is not 4-connected to the border through unset pixels.
pub fn fill_holes(m: &Mask) -> Mask {
    let outside = border_connected(&m.invert(), Connectivity::Four);
    outside.invert()
}

/// Keep the `keep` largest components of at least `min_area` pixels (8-connected).
pub fn largest_components(m: &Mask, keep: usize, min_area: usize) -> Mask {
    let (labels, sizes) = label_components(m, Connectivity::Eight);
    let mut order: Vec<usize> = (0..sizes.len()).filter(|&i| sizes[i] >= min_area).collect();
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
    order.truncate(keep);
    let mut retained = vec![false; sizes.len() + 1];
    for i in order {
        retained[i + 1] = true;
    }
    let data = labels.iter().map(|&l| retained[l as usize]).collect();
    Mask::from_vec(m.width(), m.height(), data).expect("dims")
}

pub fn segment_morphological(slice: &GrayImage) -> CoarseMask {
    let (w, h) = slice.dimensions();
    let se = StructuringElement::ellipse(3);
    let dark = opening(&binarize(slice), &se, OPEN_ITERATIONS);
    let air = border_connected(&dark, Connectivity::Eight);
    let body = air.invert();
    let interior = Mask::from_vec(
        w,
        h,
        dark.as_slice()
            .iter()
            .zip(air.as_slice())
            .map(|(&d, &a)| d && !a)
            .collect(),
    )
    .expect("dims");
    let min_area = (MIN_COMPONENT_FRACTION * (w as f64) * (h as f64)).ceil() as usize;
    let lungs = fill_holes(&largest_components(&interior, MAX_LUNG_COMPONENTS, min_area));
    // hole filling must not pull in the border-connected air
    let lungs = Mask::from_vec(
        w,
        h,
        lungs
            .as_slice()
            .iter()
            .zip(air.as_slice())
            .map(|(&l, &a)| l && !a)
            .collect(),
    )
    .expect("dims");
    let count = lungs.count();
    let bbox = if count == 0 { None } else { body.bbox() };
    CoarseMask {
        lung_ratio: count as f64 / (w as f64 * h as f64),
        mask: lungs,
        body,
        bbox,
    }
}

/// Union of all present per-slice boxes.
pub fn volume_bbox(masks: &[CoarseMask]) -> Result<BBox> {
    union_bboxes(masks.iter().map(|m| m.bbox))
        .ok_or_else(|| Error::Unsegmentable("no slice produced a lung bounding box".into()))
}

pub fn union_bboxes(boxes: impl IntoIterator<Item = Option<BBox>>) -> Option<BBox> {
    boxes
        .into_iter()
        .flatten()
        .reduce(|acc, b| acc.union(&b))
}

/// Slice with the lung mask tinted red and the bounding box drawn in green.
pub fn render_overlay(slice: &GrayImage, coarse: &CoarseMask) -> RgbImage {
    let mut out = RgbImage::from_fn(slice.width(), slice.height(), |x, y| {
        let v = slice.get_pixel(x, y).0[0];
        if coarse.mask.get(x, y) {
            image::Rgb([v / 2 + 127, v / 2, v / 2])
        } else {
            image::Rgb([v, v, v])
        }
    });
    if let Some(b) = coarse.bbox {
        for x in b.x0..b.x1 {
            out.put_pixel(x, b.y0, image::Rgb([0, 255, 0]));
            out.put_pixel(x, b.y1 - 1, image::Rgb([0, 255, 0]));
        }
        for y in b.y0..b.y1 {
            out.put_pixel(b.x0, y, image::Rgb([0, 255, 0]));
            out.put_pixel(b.x1 - 1, y, image::Rgb([0, 255, 0]));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ellipse_elements_match_reference_shapes() {
        let e3 = StructuringElement::ellipse(3);
        let cross: Vec<(i32, i32)> = vec![(0, -1), (-1, 0), (0, 0), (1, 0), (0, 1)];
        assert_eq!(e3.offsets, cross);
        let e5 = StructuringElement::ellipse(5);
        assert_eq!(e5.offsets.len(), 17);
        assert!(!e5.contains(-1, -2) && e5.contains(0, -2) && e5.contains(-2, -1));
    }

    #[test]
    fn uniform_images_binarize_by_level() {
        let zero = GrayImage::new(64, 64);
        assert_eq!(binarize(&zero).count(), 64 * 64);
        let white = GrayImage::from_pixel(64, 64, image::Luma([255]));
        assert_eq!(binarize(&white).count(), 0);
    }

    #[test]
    fn blank_slices_give_empty_masks() {
        for v in [0u8, 255] {
            let c = segment_morphological(&GrayImage::from_pixel(128, 128, image::Luma([v])));
            assert!(c.mask.is_empty());
            assert_eq!(c.lung_ratio, 0.0);
            assert_eq!(c.bbox, None);
        }
    }

    #[test]
    fn fill_holes_closes_interior() {
        let mut m = Mask::from_fn(20, 20, |x, y| (5..15).contains(&x) && (5..15).contains(&y));
        for y in 9..12 {
            for x in 9..12 {
                m.set(x, y, false);
            }
        }
        let filled = fill_holes(&m);
        assert_eq!(filled.count(), 100);
    }

    #[test]
    fn union_of_two() {
        let u = union_bboxes([Some(BBox::new(10, 10, 100, 100)), None, Some(BBox::new(5, 20, 90, 120))]);
        assert_eq!(u, Some(BBox::new(5, 10, 100, 120)));
        assert_eq!(union_bboxes([None, None]), None);
    }
}
