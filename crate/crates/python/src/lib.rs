//! Python bindings for the `ctbert` core crate.
//!
//! Images cross the boundary as raw row-major `bytes` plus width and height;
//! masks come back as `bytes` of 0/1. Structured reports are returned as plain
//! dicts and lists.

use std::path::PathBuf;

use candle_core::Device;
use image::GrayImage;
use pyo3::exceptions::{PyFileNotFoundError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ctbert::config::RunConfig;
use ctbert::features::{read_feature_cache, write_feature_cache, EmbeddingRecord};
use ctbert::ingest::Label;
use ctbert::mlp::{mlp_forward, pool_features, Mlp, Pooling};
use ctbert::pipeline::{Pipeline, Stage};
use ctbert::raster::Mask;
use ctbert::select::{self, SelectionResult};
use ctbert::Error;

fn to_py(e: Error) -> PyErr {
    let msg = format!("{}: {e}", e.kind());
    match e {
        Error::MissingStage { .. } => PyFileNotFoundError::new_err(msg),
        Error::Io { .. } | Error::Image { .. } => PyOSError::new_err(msg),
        Error::Config(_)
        | Error::Shape(_)
        | Error::InvalidData(_)
        | Error::CorruptInput(_)
        | Error::Empty(_)
        | Error::IdMismatch(_) => PyValueError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(to_py)
}

fn json<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn gray(pixels: &[u8], width: u32, height: u32) -> PyResult<GrayImage> {
    GrayImage::from_raw(width, height, pixels.to_vec()).ok_or_else(|| {
        PyValueError::new_err(format!("{} bytes do not make a {width}x{height} image", pixels.len()))
    })
}

fn mask_bytes<'py>(py: Python<'py>, m: &Mask) -> Bound<'py, PyBytes> {
    let raw: Vec<u8> = m.as_slice().iter().map(|&b| b as u8).collect();
    PyBytes::new(py, &raw)
}

fn kept(indices: Vec<usize>) -> SelectionResult {
    SelectionResult {
        kept_indices: indices,
        final_threshold: 0.0,
    }
}

/// Keep slices by descending lung-ratio threshold. Returns `(kept_indices, threshold)`.
#[pyfunction]
#[pyo3(signature = (ratios, min_keep = select::MIN_KEEP))]
fn select_slices(ratios: Vec<f64>, min_keep: usize) -> PyResult<(Vec<usize>, f64)> {
    let r = select::select_slices(&ratios, min_keep).map_err(to_py)?;
    Ok((r.kept_indices, r.final_threshold))
}

#[pyfunction]
#[pyo3(signature = (kept_indices, k = select::SET_LEN, seed = 0))]
fn resample_train(kept_indices: Vec<usize>, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    select::resample_train(&kept(kept_indices), k, &mut rng).indices
}

#[pyfunction]
#[pyo3(signature = (kept_indices, k = select::SET_LEN))]
fn resample_eval(kept_indices: Vec<usize>, k: usize) -> Vec<usize> {
    select::resample_eval(&kept(kept_indices), k).indices
}

#[pyfunction]
#[pyo3(signature = (kept_indices, k = select::SET_LEN))]
fn resample_test(kept_indices: Vec<usize>, k: usize) -> Vec<Vec<usize>> {
    select::resample_test(&kept(kept_indices), k)
        .into_iter()
        .map(|s| s.indices)
        .collect()
}

/// Threshold-and-morphology lung mask for one 8-bit slice.
#[pyfunction]
fn segment_morphological<'py>(
    py: Python<'py>,
    pixels: &[u8],
    width: u32,
    height: u32,
) -> PyResult<Bound<'py, PyDict>> {
    let coarse = ctbert::morph::segment_morphological(&gray(pixels, width, height)?);
    let d = PyDict::new(py);
    d.set_item("mask", mask_bytes(py, &coarse.mask))?;
    d.set_item("body", mask_bytes(py, &coarse.body))?;
    d.set_item("lung_ratio", coarse.lung_ratio)?;
    d.set_item("bbox", coarse.bbox.map(|b| (b.x0, b.y0, b.x1, b.y1)))?;
    Ok(d)
}

/// Build the three-channel frame from a slice and its lung mask.
/// Returns planar `bytes` of length `3 * width * height`.
#[pyfunction]
#[pyo3(signature = (pixels, mask, width, height, channels = "rml"))]
fn compose<'py>(
    py: Python<'py>,
    pixels: &[u8],
    mask: &[u8],
    width: u32,
    height: u32,
    channels: &str,
) -> PyResult<Bound<'py, PyBytes>> {
    let r = gray(pixels, width, height)?;
    if mask.len() != r.len() {
        return Err(PyValueError::new_err("mask and image sizes differ"));
    }
    let m = Mask::from_vec(width, height, mask.iter().map(|&v| v != 0).collect()).map_err(to_py)?;
    let lung: Vec<u8> = pixels.iter().zip(mask).map(|(&p, &k)| if k != 0 { p } else { 0 }).collect();
    let l = gray(&lung, width, height)?;
    let out = ctbert::compose::compose_rml(&r, &m, &l, parse(channels)?).map_err(to_py)?;
    Ok(PyBytes::new(py, out.as_slice()))
}

/// Metrics for `(volume_id, class)` predictions against labels.
#[pyfunction]
fn evaluate<'py>(
    py: Python<'py>,
    preds: Vec<(String, usize)>,
    labels: Vec<(String, usize)>,
) -> PyResult<Bound<'py, PyAny>> {
    let report = ctbert::metrics::evaluate(&preds, &labels).map_err(to_py)?;
    json(py, &report)
}

type RecordTuple = (String, i32, Option<String>, Vec<f32>);

/// Write `(volume_id, set_index, label, embedding)` tuples to a feature cache.
#[pyfunction]
fn write_features(path: PathBuf, records: Vec<RecordTuple>) -> PyResult<()> {
    let recs = records
        .into_iter()
        .map(|(volume_id, set_index, label, embedding)| {
            Ok(EmbeddingRecord {
                volume_id,
                set_index,
                label: label.as_deref().map(parse::<Label>).transpose()?,
                embedding,
            })
        })
        .collect::<PyResult<Vec<_>>>()?;
    write_feature_cache(&path, &recs).map_err(to_py)
}

#[pyfunction]
fn read_features(path: PathBuf) -> PyResult<Vec<RecordTuple>> {
    Ok(read_feature_cache(&path)
        .map_err(to_py)?
        .into_iter()
        .map(|r| (r.volume_id, r.set_index, r.label.map(|l| l.to_string()), r.embedding))
        .collect())
}

/// Pool per-set embeddings of one volume (`max`, `avg` or `both`).
#[pyfunction]
#[pyo3(signature = (vectors, mode = "both"))]
fn pool(vectors: Vec<Vec<f32>>, mode: &str) -> PyResult<Vec<f32>> {
    pool_features(&vectors, parse(mode)?).map_err(to_py)
}

/// A trained pooled-embedding classifier loaded from a checkpoint.
#[pyclass(unsendable)]
struct MlpModel {
    inner: Mlp,
    pooling: Pooling,
    fingerprint: String,
}

#[pymethods]
impl MlpModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, cfg, fingerprint) = Mlp::load(&path, &Device::Cpu).map_err(to_py)?;
        Ok(MlpModel {
            inner,
            pooling: cfg.pooling,
            fingerprint,
        })
    }

    #[getter]
    fn pooling(&self) -> String {
        self.pooling.to_string()
    }

    #[getter]
    fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Logits `[covid, non-covid]` for one pooled vector.
    fn logits(&self, vector: Vec<f32>) -> PyResult<[f32; 2]> {
        mlp_forward(&vector, &self.inner).map_err(to_py)
    }

    /// Pool the set embeddings of one volume, then score it.
    fn logits_for_sets(&self, sets: Vec<Vec<f32>>) -> PyResult<[f32; 2]> {
        let v = pool_features(&sets, self.pooling).map_err(to_py)?;
        self.logits(v)
    }
}

/// Default run configuration as TOML.
#[pyfunction]
fn default_config() -> PyResult<String> {
    RunConfig::default().to_toml().map_err(to_py)
}

/// Parse and validate a TOML configuration; returns its fingerprint.
#[pyfunction]
fn check_config(text: &str) -> PyResult<String> {
    Ok(RunConfig::from_toml(text).map_err(to_py)?.fingerprint())
}

/// Run one pipeline stage (or `all`). Returns one dict per stage.
#[pyfunction]
#[pyo3(signature = (stage, config = None, output = None, seed = None, force = false))]
fn run_stage<'py>(
    py: Python<'py>,
    stage: &str,
    config: Option<PathBuf>,
    output: Option<PathBuf>,
    seed: Option<u64>,
    force: bool,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(&p).map_err(to_py)?,
        None => RunConfig::default(),
    };
    if let Some(o) = output {
        cfg.output_dir = o;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let pipeline = Pipeline::new(cfg, force);
    let outcomes = if stage == "all" {
        pipeline.run_all()
    } else {
        pipeline.run(parse::<Stage>(stage)?).map(|o| vec![o])
    }
    .map_err(to_py)?;
    outcomes
        .into_iter()
        .map(|o| {
            let d = PyDict::new(py);
            d.set_item("stage", o.stage.name())?;
            d.set_item("reused", o.reused)?;
            d.set_item("produced", o.produced)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn ctbert_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SET_LEN", select::SET_LEN)?;
    m.add("MIN_KEEP", select::MIN_KEEP)?;
    m.add_function(wrap_pyfunction!(select_slices, m)?)?;
    m.add_function(wrap_pyfunction!(resample_train, m)?)?;
    m.add_function(wrap_pyfunction!(resample_eval, m)?)?;
    m.add_function(wrap_pyfunction!(resample_test, m)?)?;
    m.add_function(wrap_pyfunction!(segment_morphological, m)?)?;
    m.add_function(wrap_pyfunction!(compose, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(write_features, m)?)?;
    m.add_function(wrap_pyfunction!(read_features, m)?)?;
    m.add_function(wrap_pyfunction!(pool, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(check_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_stage, m)?)?;
    m.add_class::<MlpModel>()?;
    Ok(())
}
