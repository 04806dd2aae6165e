//! NCHW ops with hand-written CPU kernels.
//!
//! Candle reduces over (0, 2, 3) through a slow strided path, and the
//! backward pass of every (1, C, 1, 1) broadcast lands there too. These ops
//! walk the contiguous buffer once per pass instead.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Shape, Tensor, WithDType};

type CResult<T> = candle_core::Result<T>;

fn slice<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> CResult<&'a [T]> {
    let data = s.as_slice::<T>()?;
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("channel op needs a contiguous input"),
    }
}

/// (N, C, H*W) of an NCHW layout.
fn nchw(l: &Layout) -> CResult<(usize, usize, usize)> {
    let (n, c, h, w) = l.shape().dims4()?;
    Ok((n, c, h * w))
}

fn check_channels(l: &Layout, c: usize) -> CResult<()> {
    if l.shape().elem_count() != c {
        candle_core::bail!("expected {c} per-channel values, got shape {:?}", l.shape());
    }
    Ok(())
}

macro_rules! dispatch {
    ($s:expr, $f:ident($($arg:expr),*)) => {
        match $s {
            CpuStorage::F32(_) => $f::<f32>($($arg),*),
            CpuStorage::F64(_) => $f::<f64>($($arg),*),
            other => candle_core::bail!("channel op: unsupported dtype {:?}", other.dtype()),
        }
    };
}

/// Mean and biased variance of each channel, in f64.
fn moments<T: WithDType>(x: &[T], n: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            s += x[base..base + hw].iter().map(|v| v.to_f64()).sum::<f64>();
        }
        let m = s / count;
        let mut q = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            q += x[base..base + hw].iter().map(|v| (v.to_f64() - m).powi(2)).sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = q / count;
    }
    (mean, var)
}

/// y = x·scale[c] + shift[c].
pub struct ChannelAffine;

fn affine_fwd<T: WithDType>(
    s1: &CpuStorage,
    l1: &Layout,
    s2: &CpuStorage,
    l2: &Layout,
    s3: &CpuStorage,
    l3: &Layout,
) -> CResult<(CpuStorage, Shape)> {
    let (n, c, hw) = nchw(l1)?;
    check_channels(l2, c)?;
    check_channels(l3, c)?;
    let (x, scale, shift) = (slice::<T>(s1, l1)?, slice::<T>(s2, l2)?, slice::<T>(s3, l3)?);
    let mut out = Vec::with_capacity(x.len());
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let (a, s) = (scale[ch].to_f64(), shift[ch].to_f64());
            out.extend(x[base..base + hw].iter().map(|v| T::from_f64(v.to_f64() * a + s)));
        }
    }
    Ok((T::to_cpu_storage_owned(out), l1.shape().clone()))
}

impl CustomOp3 for ChannelAffine {
    fn name(&self) -> &'static str {
        "channel-affine"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        dispatch!(s1, affine_fwd(s1, l1, s2, l2, s3, l3))
    }

    fn bwd(
        &self,
        x: &Tensor,
        scale: &Tensor,
        shift: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let dx = grad.apply_op3_no_bwd(scale, &shift.zeros_like()?, &ChannelAffine)?;
        let sums = x.contiguous()?.apply_op2_no_bwd(&grad, &ChannelSums)?;
        let dscale = sums.get(0)?.reshape(scale.shape())?;
        let dshift = sums.get(1)?.reshape(shift.shape())?;
        Ok((Some(dx), Some(dscale), Some(dshift)))
    }
}

/// (2, C): Σ g·x and Σ g over each channel.
struct ChannelSums;

fn sums_fwd<T: WithDType>(s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
    let (n, c, hw) = nchw(l1)?;
    if l1.shape() != l2.shape() {
        candle_core::bail!("channel sums: shape mismatch {:?} vs {:?}", l1.shape(), l2.shape());
    }
    let (x, g) = (slice::<T>(s1, l1)?, slice::<T>(s2, l2)?);
    let mut gx = vec![0.0; c];
    let mut gs = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for (xv, gv) in x[base..base + hw].iter().zip(&g[base..base + hw]) {
                let gv = gv.to_f64();
                gx[ch] += gv * xv.to_f64();
                gs[ch] += gv;
            }
        }
    }
    let out: Vec<T> = gx.into_iter().chain(gs).map(T::from_f64).collect();
    Ok((T::to_cpu_storage_owned(out), Shape::from((2, c))))
}

impl CustomOp2 for ChannelSums {
    fn name(&self) -> &'static str {
        "channel-sums"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        dispatch!(s1, sums_fwd(s1, l1, s2, l2))
    }
}

/// (2, C): per-channel mean and biased variance.
pub struct ChannelMoments;

fn moments_fwd<T: WithDType>(s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
    let (n, c, hw) = nchw(l)?;
    let (mean, var) = moments(slice::<T>(s, l)?, n, c, hw);
    let out: Vec<T> = mean.into_iter().chain(var).map(T::from_f64).collect();
    Ok((T::to_cpu_storage_owned(out), Shape::from((2, c))))
}

impl CustomOp1 for ChannelMoments {
    fn name(&self) -> &'static str {
        "channel-moments"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        dispatch!(s, moments_fwd(s, l))
    }
}

/// Batch-statistics normalization followed by the gamma/beta affine.
pub struct BatchNormTrain {
    pub eps: f64,
}

fn bn_fwd<T: WithDType>(
    eps: f64,
    s1: &CpuStorage,
    l1: &Layout,
    s2: &CpuStorage,
    l2: &Layout,
    s3: &CpuStorage,
    l3: &Layout,
) -> CResult<(CpuStorage, Shape)> {
    let (n, c, hw) = nchw(l1)?;
    check_channels(l2, c)?;
    check_channels(l3, c)?;
    let (x, gamma, beta) = (slice::<T>(s1, l1)?, slice::<T>(s2, l2)?, slice::<T>(s3, l3)?);
    let (mean, var) = moments(x, n, c, hw);
    let mut out = Vec::with_capacity(x.len());
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let a = gamma[ch].to_f64() / (var[ch] + eps).sqrt();
            let s = beta[ch].to_f64() - mean[ch] * a;
            out.extend(x[base..base + hw].iter().map(|v| T::from_f64(v.to_f64() * a + s)));
        }
    }
    Ok((T::to_cpu_storage_owned(out), l1.shape().clone()))
}

impl CustomOp3 for BatchNormTrain {
    fn name(&self) -> &'static str {
        "batch-norm-train"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        dispatch!(s1, bn_fwd(self.eps, s1, l1, s2, l2, s3, l3))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let numel = x.elem_count();
        let c = gamma.elem_count();
        let packed = x
            .contiguous()?
            .apply_op3_no_bwd(&gamma.contiguous()?, &grad.contiguous()?, &BatchNormGrad { eps: self.eps })?;
        let dx = packed.narrow(0, 0, numel)?.reshape(x.shape())?;
        let dgamma = packed.narrow(0, numel, c)?.reshape(gamma.shape())?;
        let dbeta = packed.narrow(0, numel + c, c)?.reshape(beta.shape())?;
        Ok((Some(dx), Some(dgamma), Some(dbeta)))
    }
}

/// Flat [dx, dgamma, dbeta] from (x, gamma, upstream grad).
struct BatchNormGrad {
    eps: f64,
}

fn bn_grad<T: WithDType>(
    eps: f64,
    s1: &CpuStorage,
    l1: &Layout,
    s2: &CpuStorage,
    l2: &Layout,
    s3: &CpuStorage,
    l3: &Layout,
) -> CResult<(CpuStorage, Shape)> {
    let (n, c, hw) = nchw(l1)?;
    check_channels(l2, c)?;
    let (x, gamma, g) = (slice::<T>(s1, l1)?, slice::<T>(s2, l2)?, slice::<T>(s3, l3)?);
    if x.len() != g.len() {
        candle_core::bail!("batch norm grad: {} inputs, {} grads", x.len(), g.len());
    }
    let (mean, var) = moments(x, n, c, hw);
    let istd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut sum_g = vec![0.0; c];
    let mut sum_gxhat = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for (xv, gv) in x[base..base + hw].iter().zip(&g[base..base + hw]) {
                let gv = gv.to_f64();
                sum_g[ch] += gv;
                sum_gxhat[ch] += gv * (xv.to_f64() - mean[ch]) * istd[ch];
            }
        }
    }
    let count = (n * hw) as f64;
    let mut out = Vec::with_capacity(x.len() + 2 * c);
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let k = gamma[ch].to_f64() * istd[ch] / count;
            out.extend(x[base..base + hw].iter().zip(&g[base..base + hw]).map(|(xv, gv)| {
                let xhat = (xv.to_f64() - mean[ch]) * istd[ch];
                T::from_f64(k * (count * gv.to_f64() - sum_g[ch] - xhat * sum_gxhat[ch]))
            }));
        }
    }
    out.extend(sum_gxhat.into_iter().chain(sum_g).map(T::from_f64));
    let len = out.len();
    Ok((T::to_cpu_storage_owned(out), Shape::from(len)))
}

impl CustomOp3 for BatchNormGrad {
    fn name(&self) -> &'static str {
        "batch-norm-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        dispatch!(s1, bn_grad(self.eps, s1, l1, s2, l2, s3, l3))
    }
}

/// Nearest-neighbour ×2 upsampling; the backward pass sums each 2×2 block.
pub struct Upsample2;

fn upsample_fwd<T: WithDType>(s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
    let (n, c, h, w) = l.shape().dims4()?;
    let x = slice::<T>(s, l)?;
    let mut out = Vec::with_capacity(4 * x.len());
    for plane in x.chunks_exact(h * w) {
        for row in plane.chunks_exact(w) {
            for _ in 0..2 {
                out.extend(row.iter().flat_map(|v| [*v, *v]));
            }
        }
    }
    Ok((T::to_cpu_storage_owned(out), Shape::from((n, c, 2 * h, 2 * w))))
}

impl CustomOp1 for Upsample2 {
    fn name(&self) -> &'static str {
        "upsample2"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        dispatch!(s, upsample_fwd(s, l))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        Ok(Some((grad.avg_pool2d(2)? * 4.0)?))
    }
}

/// 2×2, stride-2 max pooling (odd trailing rows/columns dropped). The
/// gradient goes to the first maximum of each window in row-major order.
///
/// Candle 0.11 scales the max-pool gradient by the tie fraction instead of
/// routing it, so a unique maximum only receives a quarter of it.
pub struct MaxPool2;

/// Row-major index of the first maximum in each pooling window.
fn argmax2<T: WithDType>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<usize> {
    let (ho, wo) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let first = base + 2 * oy * w + 2 * ox;
                let mut best = first;
                for cand in [first + 1, first + w, first + w + 1] {
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                idx.push(best);
            }
        }
    }
    idx
}

fn maxpool_fwd<T: WithDType>(s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
    let (n, c, h, w) = l.shape().dims4()?;
    let x = slice::<T>(s, l)?;
    let out: Vec<T> = argmax2(x, n * c, h, w).into_iter().map(|i| x[i]).collect();
    Ok((T::to_cpu_storage_owned(out), Shape::from((n, c, h / 2, w / 2))))
}

impl CustomOp1 for MaxPool2 {
    fn name(&self) -> &'static str {
        "maxpool2"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        dispatch!(s, maxpool_fwd(s, l))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        Ok(Some(arg.apply_op2_no_bwd(&grad.contiguous()?, &MaxPool2Grad)?))
    }
}

/// (input, pooled gradient) → input gradient of [`MaxPool2`].
struct MaxPool2Grad;

fn maxpool_grad<T: WithDType>(s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
    let (n, c, h, w) = l1.shape().dims4()?;
    if l2.shape().dims4()? != (n, c, h / 2, w / 2) {
        candle_core::bail!("maxpool2 grad: {:?} does not pool to {:?}", l1.shape(), l2.shape());
    }
    let (x, g) = (slice::<T>(s1, l1)?, slice::<T>(s2, l2)?);
    let mut out = vec![T::zero(); x.len()];
    for (i, gv) in argmax2(x, n * c, h, w).into_iter().zip(g) {
        out[i] = *gv;
    }
    Ok((T::to_cpu_storage_owned(out), l1.shape().clone()))
}

impl CustomOp2 for MaxPool2Grad {
    fn name(&self) -> &'static str {
        "maxpool2-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        dispatch!(s1, maxpool_grad(s1, l1, s2, l2))
    }
}
