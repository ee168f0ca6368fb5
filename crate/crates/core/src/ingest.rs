//! Dataset discovery, volume loading and slice normalization.
//!
//! Expected layout: `<root>/<split>/<class>/<volume_id>/<slice>.{png,jpg}` where
//! `<class>` is `covid` or `non-covid`. The test split may omit the class level,
//! in which case its volumes carry the `unknown` label.

use std::cmp::Ordering;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{resize_gray, SLICE_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

/// Volume label. Class index 0 is COVID, 1 is non-COVID.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "covid")]
    Covid,
    #[serde(rename = "non-covid")]
    NonCovid,
    #[serde(rename = "unknown")]
    Unknown,
}

impl Label {
    pub fn class_index(&self) -> Option<usize> {
        match self {
            Label::Covid => Some(0),
            Label::NonCovid => Some(1),
            Label::Unknown => None,
        }
    }

    pub fn from_class_index(idx: usize) -> Label {
        match idx {
            0 => Label::Covid,
            1 => Label::NonCovid,
            _ => Label::Unknown,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Label::Covid => "covid",
            Label::NonCovid => "non-covid",
            Label::Unknown => "unknown",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "covid" => Ok(Label::Covid),
            "non-covid" => Ok(Label::NonCovid),
            "unknown" => Ok(Label::Unknown),
            _ => Err(Error::InvalidData(format!("unknown label `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub volume_id: String,
    pub path: PathBuf,
    pub label: Label,
    pub slice_count: usize,
}

/// A loaded volume: every slice is normalized to 512×512.
#[derive(Debug, Clone, PartialEq)]
pub struct CtVolume {
    pub volume_id: String,
    pub slices: Vec<GrayImage>,
    /// File names in slice order.
    pub slice_names: Vec<String>,
    pub label: Option<Label>,
}

impl CtVolume {
    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }
}

/// Result of walking one split directory.
#[derive(Debug, Default)]
pub struct ScanReport {
    pub entries: Vec<ManifestEntry>,
    /// Volume directories without any slice image.
    pub skipped: Vec<PathBuf>,
}

/// Numeric-aware string ordering: digit runs compare by value.
pub fn natural_cmp(a: &str, b: &str) -> Ordering {
    let (mut ai, mut bi) = (a.chars().peekable(), b.chars().peekable());
    loop {
        match (ai.peek().copied(), bi.peek().copied()) {
            (None, None) => return a.cmp(b),
            (None, Some(_)) => return Ordering::Less,
            (Some(_), None) => return Ordering::Greater,
            (Some(ca), Some(cb)) if ca.is_ascii_digit() && cb.is_ascii_digit() => {
                let na: String = std::iter::from_fn(|| ai.next_if(|c| c.is_ascii_digit())).collect();
                let nb: String = std::iter::from_fn(|| bi.next_if(|c| c.is_ascii_digit())).collect();
                let ta = na.trim_start_matches('0');
                let tb = nb.trim_start_matches('0');
                let ord = ta.len().cmp(&tb.len()).then_with(|| ta.cmp(tb));
                if ord != Ordering::Equal {
                    return ord;
                }
            }
            (Some(ca), Some(cb)) => {
                if ca != cb {
                    return ca.cmp(&cb);
                }
                ai.next();
                bi.next();
            }
        }
    }
}

pub fn is_slice_file(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
            .unwrap_or(false)
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort_by(|a, b| natural_cmp(&file_name(a), &file_name(b)));
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Slice image files of a volume directory in natural filename order.
pub fn list_slices(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(read_dir_sorted(dir)?
        .into_iter()
        .filter(|p| is_slice_file(p))
        .collect())
}

pub fn scan_split(root: &Path, split: Split) -> Result<ScanReport> {
    if !root.is_dir() {
        return Err(Error::Config(format!(
            "dataset root {} does not exist",
            root.display()
        )));
    }
    let split_dir = root.join(split.as_str());
    if !split_dir.is_dir() {
        return Err(Error::Config(format!(
            "split directory {} does not exist",
            split_dir.display()
        )));
    }

    let children: Vec<PathBuf> = read_dir_sorted(&split_dir)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    let class_dirs: Vec<(Label, PathBuf)> = children
        .iter()
        .filter_map(|p| match file_name(p).as_str() {
            "covid" => Some((Label::Covid, p.clone())),
            "non-covid" => Some((Label::NonCovid, p.clone())),
            _ => None,
        })
        .collect();

    let mut volume_dirs = Vec::new();
    if class_dirs.is_empty() {
        if split != Split::Test {
            return Err(Error::Config(format!(
                "{} has no `covid`/`non-covid` class directories",
                split_dir.display()
            )));
        }
        volume_dirs.extend(children.into_iter().map(|p| (Label::Unknown, p)));
    } else {
        for (label, dir) in class_dirs {
            for p in read_dir_sorted(&dir)? {
                if p.is_dir() {
                    volume_dirs.push((label, p));
                }
            }
        }
    }

    let mut report = ScanReport::default();
    for (label, dir) in volume_dirs {
        let count = list_slices(&dir)?.len();
        if count == 0 {
            log::warn!("skipping empty volume directory {}", dir.display());
            report.skipped.push(dir);
            continue;
        }
        report.entries.push(ManifestEntry {
            volume_id: file_name(&dir),
            path: dir,
            label,
            slice_count: count,
        });
    }
    report
        .entries
        .sort_by(|a, b| natural_cmp(&a.volume_id, &b.volume_id));
    for pair in report.entries.windows(2) {
        if pair[0].volume_id == pair[1].volume_id {
            return Err(Error::InvalidData(format!(
                "duplicate volume id `{}` in {}",
                pair[0].volume_id,
                split_dir.display()
            )));
        }
    }
    Ok(report)
}

/// One manifest entry per non-empty volume directory, ordered by volume id.
pub fn scan_dataset(root: &Path, split: Split) -> Result<Vec<ManifestEntry>> {
    scan_split(root, split).map(|r| r.entries)
}

/// Resize to 512×512 with bilinear interpolation; 512×512 input is returned unchanged.
pub fn normalize_slice(img: &GrayImage) -> Result<GrayImage> {
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::CorruptInput(format!(
            "slice has zero size ({}x{})",
            img.width(),
            img.height()
        )));
    }
    if img.width() == SLICE_SIZE && img.height() == SLICE_SIZE {
        return Ok(img.clone());
    }
    Ok(resize_gray(img, SLICE_SIZE, SLICE_SIZE))
}

/// Decode a slice file to 8-bit grayscale; color inputs are reduced by luminance.
pub fn read_slice(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(img.to_luma8())
}

pub fn load_volume(entry: &ManifestEntry) -> Result<CtVolume> {
    let files = list_slices(&entry.path)?;
    if files.is_empty() {
        return Err(Error::Empty(format!(
            "volume directory {} has no slices",
            entry.path.display()
        )));
    }
    let mut slices = Vec::with_capacity(files.len());
    let mut names = Vec::with_capacity(files.len());
    for f in &files {
        let img = read_slice(f)?;
        let img = normalize_slice(&img).map_err(|e| match e {
            Error::CorruptInput(m) => Error::CorruptInput(format!("{}: {m}", f.display())),
            other => other,
        })?;
        slices.push(img);
        names.push(file_name(f));
    }
    Ok(CtVolume {
        volume_id: entry.volume_id.clone(),
        slices,
        slice_names: names,
        label: match entry.label {
            Label::Unknown => None,
            l => Some(l),
        },
    })
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for e in entries {
        w.serialize(e).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let headers = r
        .headers()
        .map_err(|e| Error::format(path, e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["volume_id", "path", "label", "slice_count"] {
        return Err(Error::format(path, "unexpected manifest header"));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| Error::format(path, e.to_string())))
        .collect()
}
