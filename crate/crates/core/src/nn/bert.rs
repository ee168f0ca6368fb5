//! Attention pooling over backbone time steps.
//!
//! A learned classification token is prepended to the `T'` feature vectors,
//! learned positional encodings are added, and one pre-norm transformer block
//! mixes the sequence. The output at the token position is the clip embedding;
//! a linear layer on it gives the logits.

use candle_core::{Module, Tensor, D};
use candle_nn::{Linear, VarBuilder};
use serde::{Deserialize, Serialize};

use super::params::DropoutRng;
use crate::error::{Error, Result};

const BERT_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BertConfig {
    pub heads: usize,
    pub layers: usize,
    /// Feed-forward width as a multiple of the feature width.
    pub ff_mult: usize,
    pub dropout: f64,
}

impl Default for BertConfig {
    fn default() -> Self {
        BertConfig {
            heads: 8,
            layers: 1,
            ff_mult: 2,
            dropout: 0.1,
        }
    }
}

fn linear(din: usize, dout: usize, vb: VarBuilder) -> Result<Linear> {
    let init = candle_nn::Init::Randn {
        mean: 0.0,
        stdev: BERT_INIT_STD,
    };
    let w = vb.get_with_hints((dout, din), "weight", init)?;
    let b = vb.get_with_hints(dout, "bias", candle_nn::init::ZERO)?;
    Ok(Linear::new(w, Some(b)))
}

const LN_EPS: f64 = 1e-5;

/// Layer normalization over the last axis, built from differentiable primitives.
#[derive(Debug, Clone)]
struct Norm {
    weight: Tensor,
    bias: Tensor,
}

impl Norm {
    fn new(dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Norm {
            weight: vb.get_with_hints(dim, "weight", candle_nn::init::ONE)?,
            bias: vb.get_with_hints(dim, "bias", candle_nn::init::ZERO)?,
        })
    }

    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let centered = xs.broadcast_sub(&xs.mean_keepdim(D::Minus1)?)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        centered
            .broadcast_div(&(var + LN_EPS)?.sqrt()?)?
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)
    }
}

#[derive(Debug, Clone)]
struct Block {
    heads: usize,
    ln1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: Norm,
    ff1: Linear,
    ff2: Linear,
}

impl Block {
    fn new(dim: usize, cfg: &BertConfig, vb: VarBuilder) -> Result<Self> {
        Ok(Block {
            heads: cfg.heads,
            ln1: Norm::new(dim, vb.pp("ln1"))?,
            q: linear(dim, dim, vb.pp("attn.q"))?,
            k: linear(dim, dim, vb.pp("attn.k"))?,
            v: linear(dim, dim, vb.pp("attn.v"))?,
            o: linear(dim, dim, vb.pp("attn.o"))?,
            ln2: Norm::new(dim, vb.pp("ln2"))?,
            ff1: linear(dim, cfg.ff_mult * dim, vb.pp("ff1"))?,
            ff2: linear(cfg.ff_mult * dim, dim, vb.pp("ff2"))?,
        })
    }

    /// Returns the updated sequence and the attention probabilities `(B, H, N, N)`.
    fn forward(
        &self,
        xs: &Tensor,
        dropout: f64,
        rng: &DropoutRng,
        train: bool,
    ) -> candle_core::Result<(Tensor, Tensor)> {
        let (b, n, d) = xs.dims3()?;
        let dh = d / self.heads;
        let h = self.ln1.forward(xs)?;
        let split = |t: Tensor| -> candle_core::Result<Tensor> {
            t.reshape((b, n, self.heads, dh))?.transpose(1, 2)?.contiguous()
        };
        let q = split(self.q.forward(&h)?)?;
        let k = split(self.k.forward(&h)?)?;
        let v = split(self.v.forward(&h)?)?;
        let scores = (q.matmul(&k.t()?)? / (dh as f64).sqrt())?;
        let probs = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let ctx = rng
            .apply(&probs, dropout, train)?
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, n, d))?;
        let xs = (xs + rng.apply(&self.o.forward(&ctx)?, dropout, train)?)?;
        let h = self.ln2.forward(&xs)?;
        let ff = self.ff2.forward(&self.ff1.forward(&h)?.gelu_erf()?)?;
        let xs = (xs + rng.apply(&ff, dropout, train)?)?;
        Ok((xs, probs))
    }
}

/// Output of the pooling head for a batch of clips.
#[derive(Debug, Clone)]
pub struct BertOutput {
    /// `(B, 2)`.
    pub logits: Tensor,
    /// Classification-token output `(B, D)`.
    pub embedding: Tensor,
    /// Per-layer attention probabilities `(B, heads, T'+1, T'+1)`.
    pub attention: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct BertPoolHead {
    cfg: BertConfig,
    dim: usize,
    positions: usize,
    cls_token: Tensor,
    pos_embedding: Tensor,
    blocks: Vec<Block>,
    classifier: Linear,
    rng: DropoutRng,
}

impl BertPoolHead {
    /// `steps` is the backbone's temporal output length; encodings cover `steps + 1` positions.
    pub fn new(
        dim: usize,
        steps: usize,
        classes: usize,
        cfg: &BertConfig,
        rng: DropoutRng,
        vb: VarBuilder,
    ) -> Result<Self> {
        if cfg.heads == 0 || dim % cfg.heads != 0 {
            return Err(Error::Config(format!(
                "feature width {dim} not divisible by {} heads",
                cfg.heads
            )));
        }
        let init = candle_nn::Init::Randn {
            mean: 0.0,
            stdev: BERT_INIT_STD,
        };
        let cls_token = vb.get_with_hints((1, 1, dim), "cls_token", init)?;
        let pos_embedding = vb.get_with_hints((1, steps + 1, dim), "pos_embedding", init)?;
        let blocks = (0..cfg.layers)
            .map(|i| Block::new(dim, cfg, vb.pp(format!("block{i}"))))
            .collect::<Result<Vec<_>>>()?;
        let classifier = linear(dim, classes, vb.pp("classifier"))?;
        Ok(BertPoolHead {
            cfg: cfg.clone(),
            dim,
            positions: steps + 1,
            cls_token,
            pos_embedding,
            blocks,
            classifier,
            rng,
        })
    }

    pub fn positional_len(&self) -> usize {
        self.positions
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classifier(&self) -> &Linear {
        &self.classifier
    }

    /// `(B, T', D)` features → logits, embedding and attention maps.
    pub fn forward(&self, features: &Tensor, train: bool) -> candle_core::Result<BertOutput> {
        let (b, t, d) = features.dims3()?;
        if t + 1 != self.positions || d != self.dim {
            candle_core::bail!(
                "features ({t}, {d}) do not match head ({}, {})",
                self.positions - 1,
                self.dim
            );
        }
        let cls = self.cls_token.broadcast_as((b, 1, d))?;
        let seq = Tensor::cat(&[&cls, features], 1)?;
        let mut xs = seq.broadcast_add(&self.pos_embedding)?;
        xs = self.rng.apply(&xs, self.cfg.dropout, train)?;
        let mut attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (ys, probs) = block.forward(&xs, self.cfg.dropout, &self.rng, train)?;
            xs = ys;
            attention.push(probs);
        }
        let embedding = xs.narrow(1, 0, 1)?.squeeze(1)?;
        let logits = self.classifier.forward(&embedding)?;
        Ok(BertOutput {
            logits,
            embedding,
            attention,
        })
    }
}

/// Ablation head: temporal average pooling then a linear classifier.
#[derive(Debug, Clone)]
pub struct MeanPoolHead {
    classifier: Linear,
}

impl MeanPoolHead {
    pub fn new(dim: usize, classes: usize, vb: VarBuilder) -> Result<Self> {
        Ok(MeanPoolHead {
            classifier: linear(dim, classes, vb.pp("classifier"))?,
        })
    }

    /// `(B, T', D)` → `((B, 2) logits, (B, D) pooled)`.
    pub fn forward(&self, features: &Tensor) -> candle_core::Result<(Tensor, Tensor)> {
        let pooled = features.mean(D::Minus2)?;
        Ok((self.classifier.forward(&pooled)?, pooled))
    }
}
