//! Synthetic chest phantoms: a bright body disk holding two dark lung ellipses,
//! optionally with bright ground-glass blobs inside the lungs.

use std::fs;
use std::path::Path;

use image::{GrayImage, Luma};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ingest::{CtVolume, Label, Split};
use crate::raster::{Mask, SLICE_SIZE};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        if self.rx <= 0.0 || self.ry <= 0.0 {
            return false;
        }
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub size: u32,
    pub body: Ellipse,
    pub lungs: [Ellipse; 2],
    pub body_level: u8,
    pub lung_level: u8,
    pub lesions: Vec<Ellipse>,
    pub lesion_level: u8,
    /// Uniform noise amplitude added to every pixel.
    pub noise: u8,
}

impl PhantomSpec {
    /// Disk of radius 200 with two 60×100 lungs, centered in a 512 slice.
    pub fn standard() -> Self {
        let c = SLICE_SIZE as f64 / 2.0;
        PhantomSpec {
            size: SLICE_SIZE,
            body: Ellipse { cx: c, cy: c, rx: 200.0, ry: 200.0 },
            lungs: [
                Ellipse { cx: c - 95.0, cy: c, rx: 60.0, ry: 100.0 },
                Ellipse { cx: c + 95.0, cy: c, rx: 60.0, ry: 100.0 },
            ],
            body_level: 190,
            lung_level: 25,
            lesions: Vec::new(),
            lesion_level: 120,
            noise: 0,
        }
    }

    /// Random geometry around the standard phantom.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let c = SLICE_SIZE as f64 / 2.0;
        let r = rng.gen_range(180.0..220.0);
        let body = Ellipse {
            cx: c + rng.gen_range(-15.0..15.0),
            cy: c + rng.gen_range(-15.0..15.0),
            rx: r,
            ry: r,
        };
        let gap = rng.gen_range(85.0..105.0);
        let lung = |rng: &mut R, side: f64| Ellipse {
            cx: body.cx + side * gap,
            cy: body.cy + rng.gen_range(-10.0..10.0),
            rx: rng.gen_range(45.0..65.0),
            ry: rng.gen_range(80.0..110.0),
        };
        let lungs = [lung(rng, -1.0), lung(rng, 1.0)];
        PhantomSpec {
            body,
            lungs,
            body_level: rng.gen_range(160..220),
            lung_level: rng.gen_range(10..40),
            noise: rng.gen_range(0..8),
            ..PhantomSpec::standard()
        }
    }

    /// Scatter `count` blobs inside the lungs.
    pub fn add_lesions<R: Rng + ?Sized>(&mut self, count: usize, rng: &mut R) {
        for _ in 0..count {
            let lung = self.lungs[rng.gen_range(0..2)];
            if lung.rx < 12.0 || lung.ry < 12.0 {
                continue;
            }
            let t = rng.gen_range(0.0..std::f64::consts::TAU);
            let f = rng.gen_range(0.0..0.5);
            let rad = rng.gen_range(6.0..(lung.rx.min(lung.ry) * 0.35).max(6.5));
            self.lesions.push(Ellipse {
                cx: lung.cx + f * lung.rx * t.cos(),
                cy: lung.cy + f * lung.ry * t.sin(),
                rx: rad,
                ry: rad,
            });
        }
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub image: GrayImage,
    /// Lung field including any lesions.
    pub lungs: Mask,
    pub body: Mask,
}

/// Pixel centers are sampled at `(x + 0.5, y + 0.5)`.
pub fn render<R: Rng + ?Sized>(spec: &PhantomSpec, rng: &mut R) -> Phantom {
    let s = spec.size;
    let mut image = GrayImage::new(s, s);
    let mut lungs = Mask::new(s, s);
    let mut body = Mask::new(s, s);
    for y in 0..s {
        for x in 0..s {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut v = 0i32;
            if spec.body.contains(fx, fy) {
                body.set(x, y, true);
                v = spec.body_level as i32;
                if spec.lungs.iter().any(|l| l.contains(fx, fy)) {
                    lungs.set(x, y, true);
                    v = spec.lung_level as i32;
                    if spec.lesions.iter().any(|l| l.contains(fx, fy)) {
                        v = spec.lesion_level as i32;
                    }
                }
            }
            if spec.noise > 0 {
                let n = spec.noise as i32;
                v += rng.gen_range(-n..=n);
            }
            image.put_pixel(x, y, Luma([v.clamp(0, 255) as u8]));
        }
    }
    Phantom { image, lungs, body }
}

/// A volume whose lungs open towards the middle slices; covid volumes carry lesions.
pub fn synthetic_volume<R: Rng + ?Sized>(
    volume_id: &str,
    label: Label,
    n_slices: usize,
    rng: &mut R,
) -> (CtVolume, Vec<Mask>) {
    let base = PhantomSpec::random(rng);
    let lesion_count = if label == Label::Covid { rng.gen_range(4..9) } else { 0 };
    let mut slices = Vec::with_capacity(n_slices);
    let mut masks = Vec::with_capacity(n_slices);
    for z in 0..n_slices {
        let t = (z as f64 + 0.5) / n_slices as f64;
        let open = (std::f64::consts::PI * t).sin().sqrt();
        let mut spec = base.clone();
        for l in &mut spec.lungs {
            l.rx *= open;
            l.ry *= open;
        }
        spec.add_lesions(lesion_count, rng);
        let p = render(&spec, rng);
        slices.push(p.image);
        masks.push(p.lungs);
    }
    let slice_names = (0..n_slices).map(|i| format!("{i}.png")).collect();
    (
        CtVolume {
            volume_id: volume_id.to_string(),
            slices,
            slice_names,
            label: Some(label),
        },
        masks,
    )
}

fn save_png(img: &GrayImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn class_dir(label: Label) -> &'static str {
    match label {
        Label::Covid => "covid",
        _ => "non-covid",
    }
}

/// Write `<root>/<split>/<class>/<id>/<i>.png` for `per_class` volumes of each class per split.
pub fn write_synthetic_dataset(
    root: &Path,
    splits: &[Split],
    per_class: usize,
    n_slices: std::ops::Range<usize>,
    seed: u64,
) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut written = 0;
    for &split in splits {
        for label in [Label::Covid, Label::NonCovid] {
            for k in 0..per_class {
                let id = format!("{}_{}_{k}", split.as_str(), class_dir(label).replace('-', ""));
                let n = rng.gen_range(n_slices.clone());
                let (vol, _) = synthetic_volume(&id, label, n, &mut rng);
                let dir = root.join(split.as_str()).join(class_dir(label)).join(&id);
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                for (img, name) in vol.slices.iter().zip(&vol.slice_names) {
                    save_png(img, &dir.join(name))?;
                }
                written += 1;
            }
        }
    }
    Ok(written)
}

/// `n` random phantoms with lesions as slice/annotation pairs.
pub fn seg_pairs(n: usize, seed: u64) -> Vec<(GrayImage, Mask)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut spec = PhantomSpec::random(&mut rng);
            let k = rng.gen_range(0..5);
            spec.add_lesions(k, &mut rng);
            let p = render(&spec, &mut rng);
            (p.image, p.lungs)
        })
        .collect()
}

/// Write `<dir>/images/<i>.png` and `<dir>/masks/<i>.png` (0/255 masks).
pub fn write_seg_corpus(dir: &Path, n: usize, seed: u64) -> Result<()> {
    for sub in ["images", "masks"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for (i, (img, mask)) in seg_pairs(n, seed).into_iter().enumerate() {
        save_png(&img, &dir.join("images").join(format!("{i}.png")))?;
        save_png(&mask.to_gray(), &dir.join("masks").join(format!("{i}.png")))?;
    }
    Ok(())
}
