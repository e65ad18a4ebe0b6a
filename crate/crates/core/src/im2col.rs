//! Stride-1 convolution as patch extraction followed by a matrix product.
//!
//! The CPU backend convolves with direct loops and differentiates the input
//! through a transposed convolution, both far slower than its matrix
//! product. Unfolding patches into columns turns every convolution and both
//! of its gradients into batched matrix products; the only extra kernels are
//! the unfold and its adjoint, the fold.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    pad: usize,
}

impl Geometry {
    fn out_hw(&self) -> (usize, usize) {
        (self.height + 2 * self.pad + 1 - self.kernel, self.width + 2 * self.pad + 1 - self.kernel)
    }

    /// For each (row ky/kx offset, output coordinate) the input coordinate,
    /// if inside the image.
    fn source(&self, k: usize, o: usize, extent: usize) -> Option<usize> {
        (o + k).checked_sub(self.pad).filter(|&i| i < extent)
    }
}

/// `(B, C, H, W)` to `(B, C*k*k, H'*W')`; row `c*k*k + ky*k + kx` holds the
/// input shifted by `(ky - pad, kx - pad)`.
struct Unfold(Geometry);

/// Adjoint of [`Unfold`]: scatter-add columns back onto the image.
struct Fold(Geometry);

fn unfold<T: WithDType>(g: &Geometry, src: &[T], batch: usize) -> Vec<T> {
    let (c, h, w, k) = (g.channels, g.height, g.width, g.kernel);
    let (oh, ow) = g.out_hw();
    let rows = c * k * k;
    let mut dst = vec![T::zero(); batch * rows * oh * ow];
    for b in 0..batch {
        for ch in 0..c {
            let img = &src[(b * c + ch) * h * w..][..h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ch * k * k + ky * k + kx;
                    let out = &mut dst[(b * rows + row) * oh * ow..][..oh * ow];
                    for oy in 0..oh {
                        let Some(iy) = g.source(ky, oy, h) else { continue };
                        let line = &img[iy * w..][..w];
                        let dline = &mut out[oy * ow..][..ow];
                        let lo = g.pad.saturating_sub(kx);
                        let hi = (w + g.pad).saturating_sub(kx).min(ow);
                        if lo < hi {
                            let first = lo + kx - g.pad;
                            dline[lo..hi].copy_from_slice(&line[first..first + hi - lo]);
                        }
                    }
                }
            }
        }
    }
    dst
}

fn fold<T: WithDType>(g: &Geometry, src: &[T], batch: usize) -> Vec<T> {
    let (c, h, w, k) = (g.channels, g.height, g.width, g.kernel);
    let (oh, ow) = g.out_hw();
    let rows = c * k * k;
    let mut dst = vec![T::zero(); batch * c * h * w];
    for b in 0..batch {
        for ch in 0..c {
            let img = &mut dst[(b * c + ch) * h * w..][..h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ch * k * k + ky * k + kx;
                    let cols = &src[(b * rows + row) * oh * ow..][..oh * ow];
                    for oy in 0..oh {
                        let Some(iy) = g.source(ky, oy, h) else { continue };
                        let line = &mut img[iy * w..][..w];
                        let sline = &cols[oy * ow..][..ow];
                        let lo = g.pad.saturating_sub(kx);
                        let hi = (w + g.pad).saturating_sub(kx).min(ow);
                        if lo < hi {
                            let first = lo + kx - g.pad;
                            for (d, s) in line[first..first + hi - lo].iter_mut().zip(&sline[lo..hi]) {
                                *d += *s;
                            }
                        }
                    }
                }
            }
        }
    }
    dst
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => Err(candle_core::Error::Msg("im2col expects a contiguous input".into())),
    }
}

impl CustomOp1 for Unfold {
    fn name(&self) -> &'static str {
        "unfold"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let batch = layout.dims()[0];
        let (oh, ow) = g.out_hw();
        let shape = Shape::from((batch, g.channels * g.kernel * g.kernel, oh * ow));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(unfold(g, contiguous(v, layout)?, batch)),
            CpuStorage::F64(v) => CpuStorage::F64(unfold(g, contiguous(v, layout)?, batch)),
            s => return Err(candle_core::Error::UnsupportedDTypeForOp(s.dtype(), "unfold")),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Fold(self.0))?))
    }
}

impl CustomOp1 for Fold {
    fn name(&self) -> &'static str {
        "fold"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let batch = layout.dims()[0];
        let shape = Shape::from((batch, g.channels, g.height, g.width));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(fold(g, contiguous(v, layout)?, batch)),
            CpuStorage::F64(v) => CpuStorage::F64(fold(g, contiguous(v, layout)?, batch)),
            s => return Err(candle_core::Error::UnsupportedDTypeForOp(s.dtype(), "fold")),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Unfold(self.0))?))
    }
}

/// Patch columns `(B, C*k*k, H'*W')` of `(B, C, H, W)` with zero padding.
pub fn unfold_patches(x: &Tensor, kernel: usize, pad: usize) -> Result<Tensor> {
    let (_, channels, height, width) = x.dims4()?;
    if height + 2 * pad < kernel || width + 2 * pad < kernel {
        return Err(Error::ShapeMismatch(format!("{kernel}x{kernel} kernel on a {height}x{width} input")));
    }
    let g = Geometry { channels, height, width, kernel, pad };
    Ok(x.contiguous()?.apply_op1(Unfold(g))?)
}

/// Stride-1 cross-correlation of `(B, C, H, W)` with `(O, C, k, k)` weights,
/// matching `Tensor::conv2d(w, pad, 1, 1, 1)`.
pub fn conv2d(x: &Tensor, weight: &Tensor, pad: usize) -> Result<Tensor> {
    let (batch, _, h, w) = x.dims4()?;
    let (o, c, k, k2) = weight.dims4()?;
    if k != k2 || c != x.dim(1)? {
        return Err(Error::ShapeMismatch(format!("conv weight {:?} on input {:?}", weight.dims(), x.dims())));
    }
    let (oh, ow) = (h + 2 * pad + 1 - k, w + 2 * pad + 1 - k);
    // Materialized per sample: the CPU matmul mishandles a stride-0
    // batched left operand.
    let wm = weight.reshape((o, c * k * k))?.broadcast_left(batch)?.contiguous()?;
    if k == 1 && pad == 0 {
        let xm = x.reshape((batch, c, h * w))?;
        return Ok(wm.matmul(&xm)?.reshape((batch, o, oh, ow))?);
    }
    let cols = unfold_patches(x, k, pad)?;
    Ok(wm.matmul(&cols)?.reshape((batch, o, oh, ow))?)
}

#[cfg(test)]
mod tests {
    use candle_core::{DType, Device, Var};

    use super::*;
    use crate::nn::SeededRng;

    #[test]
    fn matches_backend_convolution_and_its_gradients() {
        let dev = Device::Cpu;
        let mut rng = SeededRng::new(3);
        for (k, pad) in [(3, 1), (1, 0), (3, 0), (5, 2)] {
            let x = Var::from_tensor(&rng.normal(&[2, 3, 7, 6], DType::F64, &dev).unwrap()).unwrap();
            let w = Var::from_tensor(&rng.normal(&[4, 3, k, k], DType::F64, &dev).unwrap()).unwrap();
            let probe = rng.normal(&[2, 4, 7 + 2 * pad + 1 - k, 6 + 2 * pad + 1 - k], DType::F64, &dev).unwrap();
            let ours = conv2d(x.as_tensor(), w.as_tensor(), pad).unwrap();
            let theirs = x.as_tensor().conv2d(w.as_tensor(), pad, 1, 1, 1).unwrap();
            let diff = (&ours - &theirs).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(diff < 1e-12, "forward k={k}: {diff}");
            let g1 = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let g2 = (theirs * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            for v in [&x, &w] {
                let a = g1.get(v.as_tensor()).unwrap();
                let b = g2.get(v.as_tensor()).unwrap();
                let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
                assert!(d < 1e-10, "gradient k={k}: {d}");
            }
        }
    }
}
