//! Second-level classifier: pooled per-volume embeddings into a three-layer MLP.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{Linear, Optimizer};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{group_by_volume, EmbeddingRecord, EMBED_DIM};
use crate::nn::params::{load_checkpoint, save_checkpoint, DropoutRng, ParamStore};
use crate::nn::schedule::{EarlyStopping, Mode, PlateauScheduler};

pub const MLP_KIND: &str = "mlp";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Max,
    Avg,
    Both,
}

impl Pooling {
    pub const ALL: [Pooling; 3] = [Pooling::Max, Pooling::Avg, Pooling::Both];

    pub fn output_dim(&self, dim: usize) -> usize {
        match self {
            Pooling::Both => 2 * dim,
            _ => dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub const ALL: [Activation; 3] = [Activation::Relu, Activation::Sigmoid, Activation::Tanh];

    pub fn apply(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        match self {
            Activation::Relu => xs.relu(),
            Activation::Sigmoid => candle_nn::ops::sigmoid(xs),
            Activation::Tanh => xs.tanh(),
        }
    }
}

macro_rules! text_enum {
    ($t:ty { $($v:ident => $s:literal),+ }) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(<$t>::$v => $s),+ })
            }
        }
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($s => Ok(<$t>::$v),)+
                    _ => Err(Error::Config(format!("unknown {} `{s}`", stringify!($t).to_lowercase()))),
                }
            }
        }
    };
}

text_enum!(Pooling { Max => "max", Avg => "avg", Both => "both" });
text_enum!(Activation { Relu => "relu", Sigmoid => "sigmoid", Tanh => "tanh" });

fn default_pooling() -> Pooling {
    Pooling::Both
}
fn default_activation() -> Activation {
    Activation::Sigmoid
}
fn default_fc1() -> usize {
    128
}
fn default_fc2() -> usize {
    32
}
fn default_dropout() -> f64 {
    0.5
}
fn default_epochs() -> usize {
    100
}
fn default_batch() -> usize {
    16
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
pub struct MlpConfig {
    #[serde(default = "default_pooling")]
    pub pooling: Pooling,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_fc1")]
    pub fc1: usize,
    #[serde(default = "default_fc2")]
    pub fc2: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    /// Defaults to 1e-4 for sigmoid, 1e-5 otherwise.
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
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

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            pooling: default_pooling(),
            activation: default_activation(),
            fc1: default_fc1(),
            fc2: default_fc2(),
            dropout: default_dropout(),
            lr: None,
            max_epochs: default_epochs(),
            batch_size: default_batch(),
            plateau_factor: default_factor(),
            plateau_patience: default_patience(),
            early_stop_patience: default_stop_patience(),
            seed: 0,
        }
    }
}

impl MlpConfig {
    pub fn effective_lr(&self) -> f64 {
        self.lr.unwrap_or(match self.activation {
            Activation::Sigmoid => 1e-4,
            _ => 1e-5,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.pooling.output_dim(EMBED_DIM)
    }
}

/// Elementwise max, mean, or their concatenation `[max, avg]`.
pub fn pool_features<V: AsRef<[f32]>>(vectors: &[V], mode: Pooling) -> Result<Vec<f32>> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::Empty("no embeddings to pool".into()))?
        .as_ref();
    let dim = first.len();
    let mut max = first.to_vec();
    let mut sum: Vec<f64> = first.iter().map(|&v| v as f64).collect();
    for v in &vectors[1..] {
        let v = v.as_ref();
        if v.len() != dim {
            return Err(Error::Shape(format!("pooling vectors of length {dim} and {}", v.len())));
        }
        for i in 0..dim {
            max[i] = max[i].max(v[i]);
            sum[i] += v[i] as f64;
        }
    }
    let n = vectors.len() as f64;
    let avg: Vec<f32> = sum.into_iter().map(|s| (s / n) as f32).collect();
    Ok(match mode {
        Pooling::Max => max,
        Pooling::Avg => avg,
        Pooling::Both => {
            max.extend(avg);
            max
        }
    })
}

/// One pooled vector per volume.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeVector {
    pub volume_id: String,
    pub class: Option<usize>,
    pub vector: Vec<f32>,
}

pub fn volume_vectors(records: &[EmbeddingRecord], mode: Pooling) -> Result<Vec<VolumeVector>> {
    group_by_volume(records)
        .into_iter()
        .map(|(volume_id, label, recs)| {
            let vs: Vec<&[f32]> = recs.iter().map(|r| r.embedding.as_slice()).collect();
            Ok(VolumeVector {
                volume_id,
                class: label.and_then(|l| l.class_index()),
                vector: pool_features(&vs, mode)?,
            })
        })
        .collect()
}

/// FC → act → dropout → FC → act → dropout → FC.
#[derive(Debug, Clone)]
pub struct Mlp {
    store: ParamStore,
    layers: [Linear; 3],
    dims: [usize; 4],
    activation: Activation,
    dropout: f64,
    rng: DropoutRng,
}

impl Mlp {
    /// Layer widths `[input, fc1, fc2, classes]`.
    pub fn with_dims(
        dims: [usize; 4],
        activation: Activation,
        dropout: f64,
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("MLP widths must be positive: {dims:?}")));
        }
        let store = ParamStore::new(seed, dtype, device);
        let vb = store.var_builder();
        let layers = [
            candle_nn::linear(dims[0], dims[1], vb.pp("fc1"))?,
            candle_nn::linear(dims[1], dims[2], vb.pp("fc2"))?,
            candle_nn::linear(dims[2], dims[3], vb.pp("fc3"))?,
        ];
        Ok(Mlp {
            store,
            layers,
            dims,
            activation,
            dropout,
            rng: DropoutRng::new(seed ^ 0xd20b_0e7),
        })
    }

    pub fn new(cfg: &MlpConfig, device: &Device) -> Result<Self> {
        Mlp::with_dims(
            [cfg.input_dim(), cfg.fc1, cfg.fc2, 2],
            cfg.activation,
            cfg.dropout,
            cfg.seed,
            DType::F32,
            device,
        )
    }

    /// Build from explicit `(weight rows, bias)` per layer; weights are `out × in`.
    pub fn from_weights(layers: &[(Vec<Vec<f64>>, Vec<f64>); 3], activation: Activation, dtype: DType) -> Result<Self> {
        let mut dims = [0usize; 4];
        dims[0] = layers[0].0.first().map_or(0, |r| r.len());
        for (i, (w, b)) in layers.iter().enumerate() {
            dims[i + 1] = w.len();
            if b.len() != w.len() || w.iter().any(|r| r.len() != dims[i]) {
                return Err(Error::Shape(format!("layer {} weights do not chain", i + 1)));
            }
        }
        let mlp = Mlp::with_dims(dims, activation, 0.0, 0, dtype, &Device::Cpu)?;
        for (i, (w, b)) in layers.iter().enumerate() {
            let flat: Vec<f64> = w.iter().flatten().copied().collect();
            let wt = Tensor::from_vec(flat, (dims[i + 1], dims[i]), &Device::Cpu)?.to_dtype(dtype)?;
            let bt = Tensor::from_vec(b.clone(), dims[i + 1], &Device::Cpu)?.to_dtype(dtype)?;
            mlp.store.get(&format!("fc{}.weight", i + 1)).expect("weight").set(&wt)?;
            mlp.store.get(&format!("fc{}.bias", i + 1)).expect("bias").set(&bt)?;
        }
        Ok(mlp)
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn reseed_dropout(&self, seed: u64) {
        self.rng.reseed(seed);
    }

    /// `(B, input)` → `(B, classes)` logits.
    pub fn forward_t(&self, xs: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let mut ys = xs.clone();
        for layer in &self.layers[..2] {
            ys = self.activation.apply(&layer.forward(&ys)?)?;
            ys = self.rng.apply(&ys, self.dropout, train)?;
        }
        self.layers[2].forward(&ys)
    }

    fn input(&self, rows: &[&[f32]]) -> Result<Tensor> {
        let mut flat = Vec::with_capacity(rows.len() * self.dims[0]);
        for r in rows {
            if r.len() != self.dims[0] {
                return Err(Error::Shape(format!(
                    "MLP input of length {}, expected {}",
                    r.len(),
                    self.dims[0]
                )));
            }
            flat.extend_from_slice(r);
        }
        Ok(Tensor::from_vec(flat, (rows.len(), self.dims[0]), self.store.device())?
            .to_dtype(self.store.dtype())?)
    }

    /// Eval-mode logits for a batch of vectors.
    pub fn logits(&self, rows: &[&[f32]]) -> Result<Vec<Vec<f32>>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let out = self.forward_t(&self.input(rows)?, false)?;
        Ok(out.to_dtype(DType::F32)?.to_vec2::<f32>()?)
    }

    pub fn save(&self, path: &Path, fingerprint: &str, cfg: &MlpConfig) -> Result<()> {
        let meta = serde_json::json!({ "dims": self.dims, "config": cfg });
        save_checkpoint(path, MLP_KIND, fingerprint, &meta, &self.store)
    }

    pub fn load(path: &Path, device: &Device) -> Result<(Self, MlpConfig, String)> {
        let ck = load_checkpoint(path)?;
        if ck.kind != MLP_KIND {
            return Err(Error::format(path, format!("expected a {MLP_KIND} checkpoint, found {}", ck.kind)));
        }
        let bad = |m: String| Error::format(path, m);
        let dims: [usize; 4] = serde_json::from_value(ck.config["dims"].clone()).map_err(|e| bad(e.to_string()))?;
        let cfg: MlpConfig = serde_json::from_value(ck.config["config"].clone()).map_err(|e| bad(e.to_string()))?;
        let mlp = Mlp::with_dims(dims, cfg.activation, cfg.dropout, 0, DType::F32, device)?;
        mlp.store.restore(&ck.tensors)?;
        Ok((mlp, cfg, ck.fingerprint))
    }
}

/// Eval-mode logits for one pooled vector.
pub fn mlp_forward(v: &[f32], mlp: &Mlp) -> Result<[f32; 2]> {
    let out = mlp.logits(&[v])?.remove(0);
    if out.len() != 2 {
        return Err(Error::Shape(format!("MLP has {} outputs, expected 2", out.len())));
    }
    Ok([out[0], out[1]])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MlpEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug)]
pub struct TrainedMlp {
    pub mlp: Mlp,
    pub log: Vec<MlpEpoch>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
}

fn labelled<'a>(rows: &'a [VolumeVector], what: &str) -> Result<(Vec<&'a [f32]>, Vec<u32>)> {
    let mut xs = Vec::with_capacity(rows.len());
    let mut ys = Vec::with_capacity(rows.len());
    for r in rows {
        let c = r
            .class
            .ok_or_else(|| Error::InvalidData(format!("{what} volume {} has no label", r.volume_id)))?;
        xs.push(r.vector.as_slice());
        ys.push(c as u32);
    }
    Ok((xs, ys))
}

fn loss_and_acc(mlp: &Mlp, xs: &Tensor, ys: &Tensor) -> Result<(f64, f64)> {
    let logits = mlp.forward_t(xs, false)?;
    let loss = candle_nn::loss::cross_entropy(&logits, ys)?
        .to_dtype(DType::F64)?
        .to_scalar::<f64>()?;
    let pred = logits.argmax(D::Minus1)?;
    let correct = pred
        .eq(ys)?
        .to_dtype(DType::F64)?
        .sum_all()?
        .to_scalar::<f64>()?;
    Ok((loss, correct / ys.dims()[0] as f64))
}

/// Adam with plateau reduction; keeps the weights with the best validation accuracy.
pub fn train_mlp(train: &[VolumeVector], val: &[VolumeVector], cfg: &MlpConfig, device: &Device) -> Result<TrainedMlp> {
    let (train_x, train_y) = labelled(train, "training")?;
    let (val_x, val_y) = labelled(val, "validation")?;
    if train_x.is_empty() || val_x.is_empty() {
        return Err(Error::Empty("MLP training needs training and validation volumes".into()));
    }
    if !(train_y.contains(&0) && train_y.contains(&1)) {
        return Err(Error::InvalidData("feature cache holds a single class; both are needed".into()));
    }
    let mlp = Mlp::new(cfg, device)?;
    let train_xt = mlp.input(&train_x)?;
    let train_yt = Tensor::new(train_y.as_slice(), device)?;
    let val_xt = mlp.input(&val_x)?;
    let val_yt = Tensor::new(val_y.as_slice(), device)?;

    let lr = cfg.effective_lr();
    let mut opt = candle_nn::AdamW::new(
        mlp.store.trainable_vars(),
        candle_nn::ParamsAdamW {
            lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut sched = PlateauScheduler::new(lr, Mode::Min, cfg.plateau_factor, cfg.plateau_patience);
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(17));
    let mut order: Vec<u32> = (0..train_x.len() as u32).collect();
    let mut best = mlp.store.snapshot()?;
    let mut log = Vec::new();
    let bs = cfg.batch_size.max(1);

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (step, chunk) in order.chunks(bs).enumerate() {
            let idx = Tensor::new(chunk, device)?;
            let xs = train_xt.index_select(&idx, 0)?;
            let ys = train_yt.index_select(&idx, 0)?;
            let loss = candle_nn::loss::cross_entropy(&mlp.forward_t(&xs, true)?, &ys)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::NonFinite { epoch, step, value });
            }
            opt.backward_step(&loss)?;
            loss_sum += value;
            batches += 1;
        }
        let (val_loss, val_acc) = loss_and_acc(&mlp, &val_xt, &val_yt)?;
        log.push(MlpEpoch {
            epoch,
            lr: opt.learning_rate(),
            train_loss: loss_sum / batches.max(1) as f64,
            val_loss,
            val_acc,
        });
        if stopper.update(epoch, val_acc) {
            best = mlp.store.snapshot()?;
        }
        opt.set_learning_rate(sched.step(val_loss));
        if stopper.should_stop() {
            break;
        }
    }
    mlp.store.restore(&best)?;
    Ok(TrainedMlp {
        best_epoch: stopper.best_epoch(),
        best_val_acc: stopper.best().unwrap_or(0.0),
        mlp,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooling_definitions() {
        let v = [vec![1.0f32, 2.0], vec![3.0, 0.0]];
        assert_eq!(pool_features(&v, Pooling::Max).unwrap(), vec![3.0, 2.0]);
        assert_eq!(pool_features(&v, Pooling::Avg).unwrap(), vec![2.0, 1.0]);
        assert_eq!(pool_features(&v, Pooling::Both).unwrap(), vec![3.0, 2.0, 2.0, 1.0]);
        let empty: [Vec<f32>; 0] = [];
        assert!(pool_features(&empty, Pooling::Max).is_err());
    }

    #[test]
    fn zero_weights_zero_logits() {
        let z = |o: usize, i: usize| (vec![vec![0.0; i]; o], vec![0.0; o]);
        let m = Mlp::from_weights(&[z(3, 4), z(2, 3), z(2, 2)], Activation::Tanh, DType::F32).unwrap();
        assert_eq!(mlp_forward(&[1.0, 2.0, 3.0, 4.0], &m).unwrap(), [0.0, 0.0]);
        assert!(mlp_forward(&[1.0], &m).is_err());
    }

    #[test]
    fn hand_computed_relu() {
        // [1,-1] -> I -> relu [1,0] -> [[2,1],[0,1]] + [0,1] -> [2,1] -> relu -> [[1,-1],[1,1]] + [0.5,0] -> [1.5,3]
        let layers = [
            (vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0]),
            (vec![vec![2.0, 1.0], vec![0.0, 1.0]], vec![0.0, 1.0]),
            (vec![vec![1.0, -1.0], vec![1.0, 1.0]], vec![0.5, 0.0]),
        ];
        let m = Mlp::from_weights(&layers, Activation::Relu, DType::F32).unwrap();
        assert_eq!(mlp_forward(&[1.0, -1.0], &m).unwrap(), [1.5, 3.0]);
    }

    #[test]
    fn sigmoid_defaults_to_larger_lr() {
        let cfg = MlpConfig::default();
        assert_eq!((cfg.pooling, cfg.activation), (Pooling::Both, Activation::Sigmoid));
        assert_eq!(cfg.effective_lr(), 1e-4);
        let relu = MlpConfig {
            activation: Activation::Relu,
            ..Default::default()
        };
        assert_eq!(relu.effective_lr(), 1e-5);
        assert_eq!(cfg.input_dim(), 1024);
    }

    #[test]
    fn single_class_rejected() {
        let rows: Vec<VolumeVector> = (0..4)
            .map(|i| VolumeVector {
                volume_id: format!("v{i}"),
                class: Some(0),
                vector: vec![0.0; 1024],
            })
            .collect();
        let r = train_mlp(&rows, &rows, &MlpConfig::default(), &Device::Cpu);
        assert!(matches!(r, Err(Error::InvalidData(_))));
    }
}
