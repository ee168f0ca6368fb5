//! Seeded parameter storage and the checkpoint file format.
//!
//! Parameters are created through a `VarBuilder` whose backend draws initial
//! values from a ChaCha stream, so a model built twice from the same seed is
//! bit-identical.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! b"CTBK"            magic
//! u32                format version (1)
//! u32                header length in bytes
//! [u8; header_len]   UTF-8 JSON header: kind, fingerprint, config, tensor index
//! f32 * n            tensor payload, concatenated in index order
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::init::{FanInOut, NormalOrUniform};
use candle_nn::{Init, VarBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CTBK";
pub const CHECKPOINT_VERSION: u32 = 1;

struct StoreInner {
    rng: ChaCha8Rng,
    vars: Vec<(String, Var)>,
    index: HashMap<String, usize>,
}

/// Named, ordered collection of variables with seeded initialization.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<StoreInner>>,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.lock().expect("param store lock");
        f.debug_struct("ParamStore")
            .field("tensors", &inner.vars.len())
            .field("dtype", &self.dtype)
            .finish()
    }
}

/// Running statistics are state, not trainable weights.
pub fn is_buffer(name: &str) -> bool {
    name.ends_with("running_mean") || name.ends_with("running_var")
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        ParamStore {
            inner: Arc::new(Mutex::new(StoreInner {
                rng: ChaCha8Rng::seed_from_u64(seed),
                vars: Vec::new(),
                index: HashMap::new(),
            })),
            dtype,
            device: device.clone(),
        }
    }

    pub fn var_builder(&self) -> VarBuilder<'static> {
        VarBuilder::from_backend(Box::new(self.clone()), self.dtype, self.device.clone())
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// All variables in creation order.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        self.inner.lock().expect("param store lock").vars.clone()
    }

    /// Variables updated by the optimizer.
    pub fn trainable_vars(&self) -> Vec<Var> {
        self.named_vars()
            .into_iter()
            .filter(|(n, _)| !is_buffer(n))
            .map(|(_, v)| v)
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        let inner = self.inner.lock().expect("param store lock");
        inner.index.get(name).map(|&i| inner.vars[i].1.clone())
    }

    pub fn zero_all(&self) -> Result<()> {
        for (_, v) in self.named_vars() {
            v.set(&v.zeros_like()?)?;
        }
        Ok(())
    }

    /// Snapshot of every tensor's current value.
    pub fn snapshot(&self) -> Result<Vec<(String, Tensor)>> {
        self.named_vars()
            .into_iter()
            .map(|(n, v)| Ok((n, v.as_tensor().copy()?)))
            .collect()
    }

    /// Overwrite variables from named tensors; every stored variable must be present.
    pub fn restore(&self, tensors: &[(String, Tensor)]) -> Result<()> {
        let lookup: HashMap<&str, &Tensor> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, var) in self.named_vars() {
            let t = lookup
                .get(name.as_str())
                .ok_or_else(|| Error::InvalidData(format!("checkpoint lacks tensor `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::Shape(format!(
                    "tensor `{name}`: checkpoint {:?}, model {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(var.dtype())?.to_device(var.device())?)?;
        }
        Ok(())
    }

    /// Copy only the tensors present in `tensors` whose shapes match; returns how many were loaded.
    pub fn restore_partial(&self, tensors: &[(String, Tensor)]) -> Result<usize> {
        let lookup: HashMap<&str, &Tensor> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut loaded = 0;
        for (name, var) in self.named_vars() {
            if let Some(t) = lookup.get(name.as_str()) {
                if t.dims() == var.dims() {
                    var.set(&t.to_dtype(var.dtype())?.to_device(var.device())?)?;
                    loaded += 1;
                }
            }
        }
        Ok(loaded)
    }

    /// Euclidean norm of the difference between current trainable weights and a snapshot.
    pub fn distance_to(&self, snapshot: &[(String, Tensor)]) -> Result<f64> {
        let lookup: HashMap<&str, &Tensor> = snapshot.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut acc = 0f64;
        for (name, var) in self.named_vars() {
            if is_buffer(&name) {
                continue;
            }
            if let Some(t) = lookup.get(name.as_str()) {
                let d = (var.as_tensor() - *t)?.to_dtype(DType::F64)?;
                acc += d.sqr()?.sum_all()?.to_scalar::<f64>()?;
            }
        }
        Ok(acc.sqrt())
    }

    fn sample(&self, rng: &mut ChaCha8Rng, shape: &Shape, init: Init) -> Vec<f64> {
        let n = shape.elem_count();
        let normal = |rng: &mut ChaCha8Rng, mean: f64, std: f64| -> Vec<f64> {
            let d = Normal::new(mean, std.max(0.0)).expect("finite std");
            (0..n).map(|_| d.sample(rng)).collect()
        };
        let uniform = |rng: &mut ChaCha8Rng, lo: f64, up: f64| -> Vec<f64> {
            (0..n)
                .map(|_| if up > lo { rng.gen_range(lo..up) } else { lo })
                .collect()
        };
        match init {
            Init::Const(v) => vec![v; n],
            Init::Randn { mean, stdev } => normal(rng, mean, stdev),
            Init::Uniform { lo, up } => uniform(rng, lo, up),
            Init::Kaiming {
                dist,
                fan,
                non_linearity,
            } => {
                let fan = fan_for(&fan, shape).max(1);
                let std = non_linearity.gain() / (fan as f64).sqrt();
                match dist {
                    NormalOrUniform::Normal => normal(rng, 0.0, std),
                    NormalOrUniform::Uniform => {
                        let bound = 3f64.sqrt() * std;
                        uniform(rng, -bound, bound)
                    }
                }
            }
        }
    }
}

fn fan_for(fan: &FanInOut, shape: &Shape) -> usize {
    let dims = shape.dims();
    let receptive: usize = dims.iter().skip(2).product();
    match (fan, dims.len()) {
        (_, 0) => 1,
        (_, 1) => dims[0],
        (FanInOut::FanIn, _) => dims[1] * receptive,
        (FanInOut::FanOut, _) => dims[0] * receptive,
    }
}

impl candle_nn::var_builder::SimpleBackend for ParamStore {
    fn get(
        &self,
        s: Shape,
        name: &str,
        h: Init,
        dtype: DType,
        dev: &Device,
    ) -> candle_core::Result<Tensor> {
        let mut inner = self.inner.lock().expect("param store lock");
        if let Some(&i) = inner.index.get(name) {
            let t = inner.vars[i].1.as_tensor().clone();
            if t.shape() != &s {
                candle_core::bail!("parameter `{name}` requested as {s:?}, stored as {:?}", t.shape());
            }
            return Ok(t);
        }
        let values = self.sample(&mut inner.rng, &s, h);
        let t = Tensor::from_vec(values, s, dev)?.to_dtype(dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        let idx = inner.vars.len();
        inner.vars.push((name.to_string(), var));
        inner.index.insert(name.to_string(), idx);
        Ok(out)
    }

    fn get_unchecked(&self, name: &str, _dtype: DType, _dev: &Device) -> candle_core::Result<Tensor> {
        let inner = self.inner.lock().expect("param store lock");
        match inner.index.get(name) {
            Some(&i) => Ok(inner.vars[i].1.as_tensor().clone()),
            None => candle_core::bail!("parameter `{name}` not found"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.inner.lock().expect("param store lock").index.contains_key(name)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    kind: String,
    fingerprint: String,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Decoded checkpoint: metadata plus named tensors (f32, CPU).
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub fingerprint: String,
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn save_checkpoint(
    path: &Path,
    kind: &str,
    fingerprint: &str,
    config: &serde_json::Value,
    store: &ParamStore,
) -> Result<()> {
    let snapshot = store.snapshot()?;
    let header = CheckpointHeader {
        kind: kind.to_string(),
        fingerprint: fingerprint.to_string(),
        config: config.clone(),
        tensors: snapshot
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.dims().to_vec(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header).map_err(|e| Error::format(path, e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for (_, t) in &snapshot {
        let values = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = bytes
        .get(12..12 + hlen)
        .ok_or_else(|| Error::format(path, "truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| Error::format(path, e.to_string()))?;
    let mut offset = 12 + hlen;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let raw = bytes
            .get(offset..offset + 4 * n)
            .ok_or_else(|| Error::format(path, format!("truncated tensor `{}`", entry.name)))?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push((
            entry.name.clone(),
            Tensor::from_vec(values, entry.shape.as_slice(), &Device::Cpu)?,
        ));
        offset += 4 * n;
    }
    if offset != bytes.len() {
        return Err(Error::format(path, "trailing bytes after tensor payload"));
    }
    Ok(Checkpoint {
        kind: header.kind,
        fingerprint: header.fingerprint,
        config: header.config,
        tensors,
    })
}

/// Seeded inverted-dropout masks, so training runs are reproducible on CPU.
#[derive(Clone)]
pub struct DropoutRng(Arc<Mutex<ChaCha8Rng>>);

impl std::fmt::Debug for DropoutRng {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("DropoutRng")
    }
}

impl DropoutRng {
    pub fn new(seed: u64) -> Self {
        DropoutRng(Arc::new(Mutex::new(ChaCha8Rng::seed_from_u64(seed))))
    }

    pub fn reseed(&self, seed: u64) {
        *self.0.lock().expect("dropout rng lock") = ChaCha8Rng::seed_from_u64(seed);
    }

    /// Zero each element with probability `p` and rescale survivors by `1/(1-p)`.
    pub fn apply(&self, xs: &Tensor, p: f64, train: bool) -> candle_core::Result<Tensor> {
        if !train || p <= 0.0 {
            return Ok(xs.clone());
        }
        if p >= 1.0 {
            return xs.zeros_like();
        }
        let n = xs.elem_count();
        let keep = 1.0 - p;
        let scale = 1.0 / keep;
        let mask: Vec<f32> = {
            let mut rng = self.0.lock().expect("dropout rng lock");
            (0..n)
                .map(|_| if rng.gen_bool(keep) { scale as f32 } else { 0.0 })
                .collect()
        };
        let mask = Tensor::from_vec(mask, xs.shape(), xs.device())?.to_dtype(xs.dtype())?;
        xs * mask
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_values() {
        let build = |seed| {
            let store = ParamStore::new(seed, DType::F32, &Device::Cpu);
            let vb = store.var_builder();
            let l = candle_nn::linear(4, 3, vb.pp("fc")).unwrap();
            l.weight().flatten_all().unwrap().to_vec1::<f32>().unwrap()
        };
        assert_eq!(build(3), build(3));
        assert_ne!(build(3), build(4));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let store = ParamStore::new(1, DType::F32, &Device::Cpu);
        let vb = store.var_builder();
        let _ = candle_nn::linear(5, 2, vb.pp("a")).unwrap();
        let _ = candle_nn::batch_norm(2, 1e-5, vb.pp("bn")).unwrap();
        save_checkpoint(&path, "test", "abc", &serde_json::json!({"k": 1}), &store).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.kind, "test");
        assert_eq!(ck.fingerprint, "abc");
        let other = ParamStore::new(2, DType::F32, &Device::Cpu);
        let vb = other.var_builder();
        let _ = candle_nn::linear(5, 2, vb.pp("a")).unwrap();
        let _ = candle_nn::batch_norm(2, 1e-5, vb.pp("bn")).unwrap();
        other.restore(&ck.tensors).unwrap();
        assert_eq!(other.distance_to(&store.snapshot().unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOPE0000000000").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
    }
}
