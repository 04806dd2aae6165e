//! 3×3, padding-1 convolution as patch extraction plus a batched matmul.
//!
//! Candle's CPU conv backward goes through a transposed convolution that is
//! several times slower than the forward pass; here the only differentiable
//! pieces are the patch gather (whose adjoint is a scatter-add) and a matmul.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};

type CResult<T> = candle_core::Result<T>;

const K: usize = 3;

fn out_size(n: usize, stride: usize) -> usize {
    (n + 2 - K) / stride + 1
}

fn contiguous<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> CResult<&'a [T]> {
    let data = s.as_slice::<T>()?;
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("im2col needs a contiguous input"),
    }
}

/// (N, C, H, W) → (N, C·9, Ho·Wo), rows ordered (c, ky, kx) like a
/// flattened (Cout, C, 3, 3) weight.
struct Im2Col {
    stride: usize,
}

fn gather<T: WithDType>(stride: usize, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
    let (n, c, h, w) = l.shape().dims4()?;
    let x = contiguous::<T>(s, l)?;
    let (ho, wo) = (out_size(h, stride), out_size(w, stride));
    let mut out = vec![T::zero(); n * c * K * K * ho * wo];
    for b in 0..n {
        for ch in 0..c {
            let src = &x[(b * c + ch) * h * w..][..h * w];
            for ky in 0..K {
                for kx in 0..K {
                    let row = ((b * c + ch) * K + ky) * K + kx;
                    let dst = &mut out[row * ho * wo..][..ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let line = &src[iy as usize * w..][..w];
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * wo + ox] = line[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((T::to_cpu_storage_owned(out), Shape::from((n, c * K * K, ho * wo))))
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col3x3"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        match s {
            CpuStorage::F32(_) => gather::<f32>(self.stride, s, l),
            CpuStorage::F64(_) => gather::<f64>(self.stride, s, l),
            other => candle_core::bail!("im2col: unsupported dtype {:?}", other.dtype()),
        }
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        let (_, _, h, w) = arg.dims4()?;
        let col2im = Col2Im {
            stride: self.stride,
            h,
            w,
        };
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&col2im)?))
    }
}

/// Adjoint of [`Im2Col`]: scatter-adds patches back into an (N, C, H, W) image.
struct Col2Im {
    stride: usize,
    h: usize,
    w: usize,
}

fn scatter<T: WithDType>(op: &Col2Im, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
    let (n, ck, hw_out) = l.shape().dims3()?;
    let (h, w, stride) = (op.h, op.w, op.stride);
    let (ho, wo) = (out_size(h, stride), out_size(w, stride));
    if ck % (K * K) != 0 || hw_out != ho * wo {
        candle_core::bail!("col2im: shape {:?} does not match a {h}×{w} image", l.shape());
    }
    let c = ck / (K * K);
    let cols = contiguous::<T>(s, l)?;
    let mut acc = vec![0.0f64; n * c * h * w];
    for b in 0..n {
        for ch in 0..c {
            let dst = &mut acc[(b * c + ch) * h * w..][..h * w];
            for ky in 0..K {
                for kx in 0..K {
                    let row = ((b * c + ch) * K + ky) * K + kx;
                    let src = &cols[row * ho * wo..][..ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let line = &mut dst[iy as usize * w..][..w];
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                line[ix as usize] += src[oy * wo + ox].to_f64();
                            }
                        }
                    }
                }
            }
        }
    }
    let out: Vec<T> = acc.into_iter().map(T::from_f64).collect();
    Ok((T::to_cpu_storage_owned(out), Shape::from((n, c, h, w))))
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im3x3"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        match s {
            CpuStorage::F32(_) => scatter::<f32>(self, s, l),
            CpuStorage::F64(_) => scatter::<f64>(self, s, l),
            other => candle_core::bail!("col2im: unsupported dtype {:?}", other.dtype()),
        }
    }
}

/// Same result as `x.conv2d(w, 1, stride, 1, 1)` for a (Cout, C, 3, 3) kernel.
pub fn conv3x3(x: &Tensor, weight: &Tensor, stride: usize) -> candle_core::Result<Tensor> {
    let (n, _, h, w) = x.dims4()?;
    let (c_out, c_in, kh, kw) = weight.dims4()?;
    if (kh, kw) != (K, K) || x.dim(1)? != c_in {
        candle_core::bail!("conv3x3: input {:?} does not fit kernel {:?}", x.shape(), weight.shape());
    }
    let cols = x.contiguous()?.apply_op1(Im2Col { stride })?;
    let wm = weight.reshape((c_out, c_in * K * K))?;
    let y = wm.broadcast_matmul(&cols)?;
    y.reshape((n, c_out, out_size(h, stride), out_size(w, stride)))
}
