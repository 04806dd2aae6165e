//! Building blocks shared by every network.

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::chanops::{BatchNormTrain, ChannelAffine, ChannelMoments, MaxPool2, Upsample2};
use super::im2col::conv3x3;
use crate::error::Result;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// How a forward pass treats parameters and normalization statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mode {
    /// Batch statistics (true) or running statistics (false).
    pub train: bool,
    /// Fold batch statistics into the running estimates.
    pub update_stats: bool,
    /// Read parameters detached from the autograd graph.
    pub frozen: bool,
}

impl Mode {
    pub const TRAIN: Mode = Mode {
        train: true,
        update_stats: true,
        frozen: false,
    };
    /// Train-mode forward with no side effects; used for finite differences.
    pub const PROBE: Mode = Mode {
        train: true,
        update_stats: false,
        frozen: false,
    };
    pub const EVAL: Mode = Mode {
        train: false,
        update_stats: false,
        frozen: true,
    };

    /// Same normalization behaviour, but parameters and stats left untouched.
    pub const fn fixed(self) -> Mode {
        Mode {
            train: self.train,
            update_stats: false,
            frozen: true,
        }
    }

    fn param(&self, v: &Var) -> Tensor {
        if self.frozen {
            v.as_detached_tensor()
        } else {
            v.as_tensor().clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    Buffer,
}

pub type Visitor<'a> = dyn FnMut(String, &Var, ParamKind) + 'a;

/// Anything holding named tensors.
pub trait Params {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>);

    fn named(&self, prefix: &str, kind: Option<ParamKind>) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |name, v, k| {
            if kind.is_none_or(|want| want == k) {
                out.push((name, v.clone()));
            }
        });
        out
    }

    fn trainable(&self, prefix: &str) -> Vec<(String, Var)> {
        self.named(prefix, Some(ParamKind::Trainable))
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Seeded parameter factory.
pub struct Init {
    rng: ChaCha8Rng,
    pub dtype: DType,
    pub device: Device,
}

impl Init {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device,
        }
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.var(data, shape)
    }

    pub fn constant(&mut self, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.var(vec![value; n], shape)
    }

    fn var(&self, data: Vec<f64>, shape: &[usize]) -> Result<Var> {
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        Ok(Var::from_tensor(&t)?)
    }
}

#[derive(Debug)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    stride: usize,
}

impl Conv2d {
    /// 3×3 convolution, padding 1. `relu_follows` selects He vs LeCun fan-in scaling.
    pub fn new(init: &mut Init, c_in: usize, c_out: usize, stride: usize, bias: bool, relu_follows: bool) -> Result<Self> {
        let fan_in = (c_in * 9) as f64;
        let gain = if relu_follows { 2.0 } else { 1.0 };
        Ok(Self {
            weight: init.normal(&[c_out, c_in, 3, 3], (gain / fan_in).sqrt())?,
            bias: if bias { Some(init.constant(&[c_out], 0.0)?) } else { None },
            stride,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = conv3x3(x, &mode.param(&self.weight), self.stride)?;
        Ok(match &self.bias {
            Some(b) => {
                let b = mode.param(b);
                y.contiguous()?.apply_op3(&b.ones_like()?, &b, ChannelAffine)?
            }
            None => y,
        })
    }
}

impl Params for Conv2d {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        f(join(prefix, "weight"), &self.weight, ParamKind::Trainable);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b, ParamKind::Trainable);
        }
    }
}

#[derive(Debug)]
pub struct BatchNorm {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Var,
    pub running_var: Var,
}

impl BatchNorm {
    pub fn new(init: &mut Init, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: init.constant(&[channels], 1.0)?,
            beta: init.constant(&[channels], 0.0)?,
            running_mean: init.constant(&[channels], 0.0)?,
            running_var: init.constant(&[channels], 1.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (n, _, h, w) = x.dims4()?;
        let x = x.contiguous()?;
        let (gamma, beta) = (mode.param(&self.gamma), mode.param(&self.beta));
        if !mode.train {
            let rm = self.running_mean.as_detached_tensor();
            let rv = self.running_var.as_detached_tensor();
            let scale = (gamma / (rv + BN_EPS)?.sqrt()?)?;
            let shift = (beta - (rm * &scale)?)?;
            return Ok(x.apply_op3(&scale, &shift, ChannelAffine)?);
        }
        if mode.update_stats {
            let moments = x.detach().apply_op1_no_bwd(&ChannelMoments)?;
            let count = (n * h * w) as f64;
            let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let m = BN_MOMENTUM;
            let rm = ((self.running_mean.as_tensor() * (1.0 - m))? + (moments.get(0)? * m)?)?;
            let rv = ((self.running_var.as_tensor() * (1.0 - m))? + (moments.get(1)? * (m * unbiased))?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
        }
        Ok(x.apply_op3(&gamma, &beta, BatchNormTrain { eps: BN_EPS })?)
    }
}

impl Params for BatchNorm {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        f(join(prefix, "gamma"), &self.gamma, ParamKind::Trainable);
        f(join(prefix, "beta"), &self.beta, ParamKind::Trainable);
        f(join(prefix, "running_mean"), &self.running_mean, ParamKind::Buffer);
        f(join(prefix, "running_var"), &self.running_var, ParamKind::Buffer);
    }
}

/// conv 3×3 → batch norm → ReLU.
#[derive(Debug)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ConvBlock {
    pub fn new(init: &mut Init, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(init, c_in, c_out, stride, false, true)?,
            bn: BatchNorm::new(init, c_out)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.bn.forward(&self.conv.forward(x, mode)?, mode)?.relu()?)
    }
}

impl Params for ConvBlock {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }
}

impl<T: Params> Params for [T] {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        for (i, item) in self.iter().enumerate() {
            item.visit(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<T: Params> Params for Vec<T> {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        self.as_slice().visit(prefix, f)
    }
}

pub fn run_blocks(blocks: &[ConvBlock], x: &Tensor, mode: Mode) -> Result<Tensor> {
    blocks.iter().try_fold(x.clone(), |h, b| b.forward(&h, mode))
}

#[derive(Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(init: &mut Init, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: init.normal(&[d_out, d_in], (1.0 / d_in as f64).sqrt())?,
            bias: init.constant(&[d_out], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(x.matmul(&mode.param(&self.weight).t()?)?
            .broadcast_add(&mode.param(&self.bias))?)
    }
}

impl Params for Linear {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        f(join(prefix, "weight"), &self.weight, ParamKind::Trainable);
        f(join(prefix, "bias"), &self.bias, ParamKind::Trainable);
    }
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Upsample2)?)
}

/// 2×2 max pooling, stride 2.
pub fn max_pool2(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(MaxPool2)?)
}

/// Row-stochastic bilinear interpolation matrix (`out`×`in`), half-pixel
/// centres, no antialiasing.
pub fn bilinear_matrix(out: usize, inp: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * inp];
    let scale = inp as f64 / out as f64;
    for i in 0..out {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        let t = src - i0 as f64;
        m[i * inp + i0] += 1.0 - t;
        m[i * inp + i1] += t;
    }
    m
}

/// Differentiable bilinear resize of an NCHW tensor.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let rh = Tensor::from_vec(bilinear_matrix(out_h, h), (out_h, h), dev)?.to_dtype(x.dtype())?;
    let rw = Tensor::from_vec(bilinear_matrix(out_w, w), (out_w, w), dev)?.to_dtype(x.dtype())?;
    let cols = x.broadcast_matmul(&rw.t()?.contiguous()?)?;
    Ok(rh.broadcast_matmul(&cols)?)
}

/// Softmax component 0 of a (N, 2) logit tensor, i.e. sigmoid(l0 - l1).
pub fn real_probability(logits: &Tensor) -> Result<Tensor> {
    let l0 = logits.narrow(D::Minus1, 0, 1)?;
    let l1 = logits.narrow(D::Minus1, 1, 1)?;
    Ok(candle_core::Tensor::sub(&l0, &l1)?.squeeze(D::Minus1)?.apply(&Sigmoid)?)
}

struct Sigmoid;

impl candle_core::Module for Sigmoid {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        // 1 / (1 + exp(-x)); the clamp keeps exp finite so the backward pass
        // never multiplies 0 by inf
        (xs.clamp(-40.0, 40.0)?.neg()?.exp()? + 1.0)?.recip()
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.apply(&Sigmoid)?)
}
