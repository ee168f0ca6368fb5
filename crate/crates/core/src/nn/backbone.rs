//! R(2+1)D residual backbone.
//!
//! Activations are laid out `(batch, time, channels, height, width)` so the
//! spatial half of each factored convolution is a plain 2-D convolution over
//! `batch·time` images and the temporal half is a 1-D convolution over
//! `batch·height·width` sequences. The network ends with spatial average
//! pooling only; the time axis is kept for the attention head.

use candle_core::{Tensor, D};
use candle_nn::init::{FanInOut, NonLinearity, NormalOrUniform};
use candle_nn::{BatchNorm, BatchNormConfig, Conv1d, Conv1dConfig, Conv2d, Conv2dConfig, Init, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const CONV_INIT: Init = Init::Kaiming {
    dist: NormalOrUniform::Normal,
    fan: FanInOut::FanOut,
    non_linearity: NonLinearity::ReLU,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Output channels of the four residual stages.
    pub widths: [usize; 4],
    /// Residual blocks per stage.
    pub blocks: [usize; 4],
    /// Channels between the spatial and temporal halves of the stem.
    pub stem_mid: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig::r2plus1d_34()
    }
}

impl BackboneConfig {
    /// ResNet-34 layout: 3/4/6/3 basic blocks, 64→512 channels.
    pub fn r2plus1d_34() -> Self {
        BackboneConfig {
            widths: [64, 128, 256, 512],
            blocks: [3, 4, 6, 3],
            stem_mid: 45,
        }
    }

    /// ResNet-18 layout.
    pub fn r2plus1d_18() -> Self {
        BackboneConfig {
            widths: [64, 128, 256, 512],
            blocks: [2, 2, 2, 2],
            stem_mid: 45,
        }
    }

    /// Narrow single-block variant for smoke tests; keeps the 512-wide output.
    pub fn tiny() -> Self {
        BackboneConfig {
            widths: [8, 16, 32, 512],
            blocks: [1, 1, 1, 1],
            stem_mid: 8,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.widths[3]
    }

    /// Temporal stride of each stage; stages 2–4 halve the time axis.
    pub fn stage_strides() -> [usize; 4] {
        [1, 2, 2, 2]
    }

    /// Time steps left after the backbone for `frames` input frames.
    pub fn temporal_out(&self, frames: usize) -> usize {
        Self::stage_strides()
            .iter()
            .fold(frames, |t, &s| conv_out(t, 3, s, 1))
    }

    /// Spatial side left after the backbone for a `size`×`size` input.
    pub fn spatial_out(&self, size: usize) -> usize {
        let stem = conv_out(size, 7, 2, 3);
        Self::stage_strides()
            .iter()
            .fold(stem, |t, &s| conv_out(t, 3, s, 1))
    }
}

fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

/// Channels of the intermediate (2+1)D representation, chosen so the factored
/// convolution has as many parameters as a full 3×3×3 kernel.
pub fn midplanes(inplanes: usize, planes: usize) -> usize {
    (inplanes * planes * 27) / (inplanes * 9 + 3 * planes)
}

fn batch_norm(c: usize, vb: VarBuilder) -> Result<BatchNorm> {
    Ok(candle_nn::batch_norm(c, BatchNormConfig::default(), vb)?)
}

/// Batch norm over `(B, T, C, H, W)`, statistics per channel.
///
/// Eval mode folds the running statistics into one scale and shift computed from
/// detached tensors, so no autograd graph is built.
fn bn5(bn: &BatchNorm, xs: &Tensor, train: bool) -> candle_core::Result<Tensor> {
    let (b, t, c, h, w) = xs.dims5()?;
    if train {
        return xs
            .reshape((b * t, c, h, w))?
            .apply_t(bn, true)?
            .reshape((b, t, c, h, w));
    }
    let inv_std = (bn.running_var().detach() + bn.eps())?.sqrt()?.recip()?;
    let (scale, shift) = match bn.weight_and_bias() {
        Some((wt, bs)) => {
            let scale = (wt.detach() * inv_std)?;
            let shift = (bs.detach() - (bn.running_mean().detach() * &scale)?)?;
            (scale, shift)
        }
        None => {
            let shift = (bn.running_mean().detach() * &inv_std)?.neg()?;
            (inv_std, shift)
        }
    };
    let shape = (1, 1, c, 1, 1);
    xs.broadcast_mul(&scale.reshape(shape)?)?
        .broadcast_add(&shift.reshape(shape)?)
}

/// Upper bound on the unfolded-patch buffer of one convolution call, in elements.
const UNFOLD_LIMIT: usize = 1 << 25;

/// Apply `f` to consecutive slices of `xs` along dim 0 so each call unfolds at most
/// [`UNFOLD_LIMIT`] elements, then concatenate.
fn chunked(
    xs: &Tensor,
    per_item: usize,
    f: impl Fn(&Tensor) -> candle_core::Result<Tensor>,
) -> candle_core::Result<Tensor> {
    let n = xs.dim(0)?;
    let step = (UNFOLD_LIMIT / per_item.max(1)).max(1);
    if step >= n {
        return f(xs);
    }
    let parts = (0..n)
        .step_by(step)
        .map(|i| f(&xs.narrow(0, i, step.min(n - i))?))
        .collect::<candle_core::Result<Vec<_>>>()?;
    Tensor::cat(&parts, 0)
}

/// Weight as used by the forward pass; detached in eval mode.
fn weight_for(w: &Tensor, train: bool) -> Tensor {
    if train {
        w.clone()
    } else {
        w.detach()
    }
}

/// `1×k×k` convolution applied frame by frame.
#[derive(Debug, Clone)]
struct SpatialConv {
    conv: Conv2d,
}

impl SpatialConv {
    fn new(cin: usize, cout: usize, k: usize, stride: usize, vb: VarBuilder) -> Result<Self> {
        let w = vb.get_with_hints((cout, cin, k, k), "weight", CONV_INIT)?;
        let cfg = Conv2dConfig {
            padding: k / 2,
            stride,
            ..Default::default()
        };
        Ok(SpatialConv {
            conv: Conv2d::new(w, None, cfg),
        })
    }

    fn forward(&self, xs: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let (b, t, c, h, w) = xs.dims5()?;
        let weight = weight_for(self.conv.weight(), train);
        let (_, _, k, _) = weight.dims4()?;
        let cfg = self.conv.config();
        let per_frame = c * k * k * (h / cfg.stride + 1) * (w / cfg.stride + 1);
        let ys = chunked(&xs.reshape((b * t, c, h, w))?, per_frame, |x| {
            x.conv2d(&weight, cfg.padding, cfg.stride, cfg.dilation, cfg.groups)
        })?;
        let (_, c2, h2, w2) = ys.dims4()?;
        ys.reshape((b, t, c2, h2, w2))
    }
}

/// `k×1×1` convolution along time.
#[derive(Debug, Clone)]
struct TemporalConv {
    conv: Conv1d,
}

impl TemporalConv {
    fn new(cin: usize, cout: usize, k: usize, stride: usize, vb: VarBuilder) -> Result<Self> {
        let w = vb.get_with_hints((cout, cin, k), "weight", CONV_INIT)?;
        let cfg = Conv1dConfig {
            padding: k / 2,
            stride,
            ..Default::default()
        };
        Ok(TemporalConv {
            conv: Conv1d::new(w, None, cfg),
        })
    }

    /// Unfolds the `k` input frames of every output step along channels and applies
    /// the kernel as one `(C_out, k·C)` matrix per step.
    fn forward(&self, xs: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let (b, t, c, h, w) = xs.dims5()?;
        let weight = weight_for(self.conv.weight(), train);
        let (cout, _, k) = weight.dims3()?;
        let cfg = self.conv.config();
        let (pad, stride) = (cfg.padding, cfg.stride);
        let t_out = (t + 2 * pad - k) / stride + 1;
        let wm = weight.permute((0, 2, 1))?.contiguous()?.reshape((cout, k * c))?;
        let frames = xs.reshape((b, t, c, h * w))?;
        let frames = if pad > 0 {
            frames.pad_with_zeros(1, pad, pad)?
        } else {
            frames
        };
        let per_step = (UNFOLD_LIMIT / (b * k * c * h * w).max(1)).max(1);
        let mut parts = Vec::with_capacity(t_out.div_ceil(per_step));
        for first in (0..t_out).step_by(per_step) {
            let n = per_step.min(t_out - first);
            let idx: Vec<u32> = (first..first + n)
                .flat_map(|o| (0..k).map(move |j| (o * stride + j) as u32))
                .collect();
            let idx = Tensor::new(idx.as_slice(), xs.device())?;
            let cols = frames.index_select(&idx, 1)?.reshape((b * n, k * c, h * w))?;
            parts.push(wm.broadcast_matmul(&cols)?.reshape((b, n, cout, h, w))?);
        }
        Tensor::cat(&parts, 1)
    }
}

/// Spatial conv → BN → ReLU → temporal conv.
#[derive(Debug, Clone)]
struct Conv2Plus1d {
    spatial: SpatialConv,
    bn: BatchNorm,
    temporal: TemporalConv,
}

impl Conv2Plus1d {
    fn new(cin: usize, cout: usize, mid: usize, stride: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Conv2Plus1d {
            spatial: SpatialConv::new(cin, mid, 3, stride, vb.pp("spatial"))?,
            bn: batch_norm(mid, vb.pp("bn"))?,
            temporal: TemporalConv::new(mid, cout, 3, stride, vb.pp("temporal"))?,
        })
    }

    fn forward(&self, xs: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let ys = self.spatial.forward(xs, train)?;
        let ys = bn5(&self.bn, &ys, train)?.relu()?;
        self.temporal.forward(&ys, train)
    }
}

/// Strided 1×1×1 projection for the residual path.
#[derive(Debug, Clone)]
struct Downsample {
    stride: usize,
    conv: SpatialConv,
    bn: BatchNorm,
}

impl Downsample {
    fn forward(&self, xs: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let xs = if self.stride > 1 {
            let t = xs.dim(1)?;
            let idx: Vec<u32> = (0..t).step_by(self.stride).map(|i| i as u32).collect();
            let idx = Tensor::new(idx.as_slice(), xs.device())?;
            xs.index_select(&idx, 1)?
        } else {
            xs.clone()
        };
        bn5(&self.bn, &self.conv.forward(&xs, train)?, train)
    }
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: Conv2Plus1d,
    bn1: BatchNorm,
    conv2: Conv2Plus1d,
    bn2: BatchNorm,
    downsample: Option<Downsample>,
}

impl BasicBlock {
    fn new(cin: usize, cout: usize, stride: usize, vb: VarBuilder) -> Result<Self> {
        let mid = midplanes(cin, cout);
        let downsample = if stride != 1 || cin != cout {
            Some(Downsample {
                stride,
                conv: SpatialConv::new(cin, cout, 1, stride, vb.pp("downsample.conv"))?,
                bn: batch_norm(cout, vb.pp("downsample.bn"))?,
            })
        } else {
            None
        };
        Ok(BasicBlock {
            conv1: Conv2Plus1d::new(cin, cout, mid, stride, vb.pp("conv1"))?,
            bn1: batch_norm(cout, vb.pp("bn1"))?,
            conv2: Conv2Plus1d::new(cout, cout, mid, 1, vb.pp("conv2"))?,
            bn2: batch_norm(cout, vb.pp("bn2"))?,
            downsample,
        })
    }

    fn forward(&self, xs: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let ys = bn5(&self.bn1, &self.conv1.forward(xs, train)?, train)?.relu()?;
        let ys = bn5(&self.bn2, &self.conv2.forward(&ys, train)?, train)?;
        let residual = match &self.downsample {
            Some(d) => d.forward(xs, train)?,
            None => xs.clone(),
        };
        (ys + residual)?.relu()
    }
}

#[derive(Debug, Clone)]
pub struct R2Plus1d {
    cfg: BackboneConfig,
    stem_spatial: SpatialConv,
    stem_bn1: BatchNorm,
    stem_temporal: TemporalConv,
    stem_bn2: BatchNorm,
    stages: Vec<Vec<BasicBlock>>,
}

impl R2Plus1d {
    pub fn new(cfg: &BackboneConfig, vb: VarBuilder) -> Result<Self> {
        if cfg.widths.iter().chain(cfg.blocks.iter()).any(|&v| v == 0) || cfg.stem_mid == 0 {
            return Err(Error::Config(format!("degenerate backbone config {cfg:?}")));
        }
        let stem = vb.pp("stem");
        let stem_spatial = SpatialConv::new(3, cfg.stem_mid, 7, 2, stem.pp("spatial"))?;
        let stem_bn1 = batch_norm(cfg.stem_mid, stem.pp("bn1"))?;
        let stem_temporal = TemporalConv::new(cfg.stem_mid, cfg.widths[0], 3, 1, stem.pp("temporal"))?;
        let stem_bn2 = batch_norm(cfg.widths[0], stem.pp("bn2"))?;
        let mut stages = Vec::with_capacity(4);
        let mut cin = cfg.widths[0];
        for (s, (&width, &count)) in cfg.widths.iter().zip(cfg.blocks.iter()).enumerate() {
            let stride = BackboneConfig::stage_strides()[s];
            let svb = vb.pp(format!("layer{}", s + 1));
            let mut blocks = Vec::with_capacity(count);
            for b in 0..count {
                blocks.push(BasicBlock::new(
                    cin,
                    width,
                    if b == 0 { stride } else { 1 },
                    svb.pp(b),
                )?);
                cin = width;
            }
            stages.push(blocks);
        }
        Ok(R2Plus1d {
            cfg: cfg.clone(),
            stem_spatial,
            stem_bn1,
            stem_temporal,
            stem_bn2,
            stages,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// `(B, T, 3, H, W)` → `(B, T', D)`: spatial average pooling only.
    ///
    /// Eval mode builds no autograd graph, so activations are released as the
    /// forward pass proceeds.
    pub fn forward(&self, xs: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let ys = self.stem_spatial.forward(xs, train)?;
        let ys = bn5(&self.stem_bn1, &ys, train)?.relu()?;
        let ys = self.stem_temporal.forward(&ys, train)?;
        let mut ys = bn5(&self.stem_bn2, &ys, train)?.relu()?;
        for stage in &self.stages {
            for block in stage {
                ys = block.forward(&ys, train)?;
            }
        }
        ys.mean(D::Minus1)?.mean(D::Minus1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stride_plan_gives_four_steps_for_32_frames() {
        let cfg = BackboneConfig::r2plus1d_34();
        assert_eq!(cfg.temporal_out(32), 4);
        assert_eq!(cfg.spatial_out(224), 14);
        assert_eq!(cfg.spatial_out(112), 7);
        assert_eq!(cfg.temporal_out(16), 2);
    }

    #[test]
    fn midplanes_match_reference_values() {
        // ResNet-style R(2+1)D mid widths for the four stage widths
        assert_eq!(midplanes(64, 64), 144);
        assert_eq!(midplanes(64, 128), 230);
        assert_eq!(midplanes(128, 128), 288);
        assert_eq!(midplanes(512, 512), 1152);
    }

    fn reference_temporal(conv: &Conv1d, xs: &Tensor) -> Tensor {
        let (b, _, c, h, w) = xs.dims5().unwrap();
        let t = xs.dim(1).unwrap();
        let seq = xs
            .permute((0, 3, 4, 2, 1))
            .unwrap()
            .contiguous()
            .unwrap()
            .reshape((b * h * w, c, t))
            .unwrap();
        let ys = candle_nn::Module::forward(conv, &seq).unwrap();
        let (_, c2, t2) = ys.dims3().unwrap();
        ys.reshape((b, h, w, c2, t2))
            .unwrap()
            .permute((0, 4, 3, 1, 2))
            .unwrap()
            .contiguous()
            .unwrap()
    }

    #[test]
    fn temporal_conv_matches_conv1d() {
        let store = crate::nn::ParamStore::new(3, candle_core::DType::F64, &candle_core::Device::Cpu);
        for stride in [1, 2] {
            let tc = TemporalConv::new(4, 5, 3, stride, store.var_builder().pp(format!("t{stride}"))).unwrap();
            let xs = Tensor::randn(0f64, 1.0, (2, 7, 4, 3, 2), &candle_core::Device::Cpu).unwrap();
            for train in [false, true] {
                let got = tc.forward(&xs, train).unwrap();
                let want = reference_temporal(&tc.conv, &xs);
                assert_eq!(got.dims(), want.dims());
                let diff = (got - want).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
                assert!(diff < 1e-12, "stride {stride}: {diff}");
            }
        }
    }

    #[test]
    fn folded_eval_batch_norm_matches_candle() {
        let dev = candle_core::Device::Cpu;
        let store = crate::nn::ParamStore::new(4, candle_core::DType::F64, &dev);
        let bn = batch_norm(3, store.var_builder().pp("bn")).unwrap();
        for (name, vals) in [
            ("bn.running_mean", [0.5, -1.0, 2.0]),
            ("bn.running_var", [0.25, 2.0, 4.0]),
            ("bn.weight", [1.5, -0.5, 2.0]),
            ("bn.bias", [0.1, 0.2, -0.3]),
        ] {
            store.get(name).unwrap().set(&Tensor::new(&vals, &dev).unwrap()).unwrap();
        }
        let xs = Tensor::randn(0f64, 1.0, (2, 4, 3, 2, 2), &dev).unwrap();
        let got = bn5(&bn, &xs, false).unwrap();
        let want = xs
            .reshape((8, 3, 2, 2))
            .unwrap()
            .apply_t(&bn, false)
            .unwrap()
            .reshape((2, 4, 3, 2, 2))
            .unwrap();
        let diff = (got - want).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12, "{diff}");
    }
}
