//! Stuff branch: coarse square masks, residual refinement, masked softmax.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Span;
use crate::nn::{Conv2d, Linear, ParamBuilder};
use crate::scene::{side_fraction, Kind, ObjectSpec, Taxonomy};

/// Binary `(K_st, H, W)` stack of square masks.
#[derive(Clone, Debug)]
pub struct CoarseStuffLayout {
    pub masks: Tensor,
    /// Stuff-local channel indices present in the input, ascending.
    pub active: Vec<usize>,
}

/// Normalized `(K_st, H, W)` stuff layout.
#[derive(Clone, Debug)]
pub struct StuffLayout {
    pub masks: Tensor,
    pub active: Vec<usize>,
}

/// Rasterize one square per stuff object; objects sharing a category are
/// OR-ed into that category's channel.
pub fn build_coarse_stuff_layout(
    stuff_objs: &[ObjectSpec],
    taxonomy: &Taxonomy,
    max_size: u32,
    height: usize,
    width: usize,
    dtype: DType,
    device: &Device,
) -> Result<CoarseStuffLayout> {
    let k = taxonomy.num_stuff();
    let (values, active) = coarse_values(stuff_objs, taxonomy, max_size, height, width)?;
    let masks = Tensor::from_vec(values, (k, height, width), device)?.to_dtype(dtype)?;
    Ok(CoarseStuffLayout { masks, active })
}

pub(crate) fn coarse_values(
    stuff_objs: &[ObjectSpec],
    taxonomy: &Taxonomy,
    max_size: u32,
    height: usize,
    width: usize,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let k = taxonomy.num_stuff();
    let mut values = vec![0.0f64; k * height * width];
    let mut active = Vec::new();
    for o in stuff_objs {
        match taxonomy.kind(o.category) {
            Some(Kind::Stuff) => {}
            Some(Kind::Thing) => return Err(Error::ThingObjectPassed(o.category)),
            None => return Err(Error::UnknownCategory(o.category as i64)),
        }
        let ch = taxonomy.local_index(o.category).expect("known category");
        let side = (side_fraction(o.size, max_size) * height.min(width) as f64).round() as usize;
        let (y0, y1) = Span::square_side(o.cy, side, height).clipped();
        let (x0, x1) = Span::square_side(o.cx, side, width).clipped();
        let plane = &mut values[ch * height * width..(ch + 1) * height * width];
        for y in y0..y1 {
            plane[y * width + x0..y * width + x1].iter_mut().for_each(|v| *v = 1.0);
        }
        active.push(ch);
    }
    active.sort_unstable();
    active.dedup();
    Ok((values, active))
}

/// Softmax over the active channels of `(K, H, W)` logits; inactive
/// channels are exactly zero.
pub fn masked_softmax(logits: &Tensor, active: &[usize]) -> Result<StuffLayout> {
    if active.is_empty() {
        return Err(Error::EmptyActiveSet);
    }
    let k = logits.dim(0)?;
    let mut flags = vec![0.0f64; k];
    for &c in active {
        if c >= k {
            return Err(Error::CategoryOutOfRange { index: c, rows: k });
        }
        flags[c] = 1.0;
    }
    let mask = Tensor::from_vec(flags, (1, k), logits.device())?;
    let out = masked_softmax_batch(&logits.unsqueeze(0)?, &mask)?.squeeze(0)?;
    let mut active = active.to_vec();
    active.sort_unstable();
    active.dedup();
    Ok(StuffLayout { masks: out, active })
}

/// Batched masked softmax over dim 1 of `(B, K, H, W)` logits with a
/// `(B, K)` 0/1 activity mask. Samples with no active channel map to zeros.
pub fn masked_softmax_batch(logits: &Tensor, active: &Tensor) -> Result<Tensor> {
    let (b, k, h, w) = logits.dims4()?;
    let shape = (b, k, h, w);
    let keep = active.ne(0.0)?.reshape((b, k, 1, 1))?.broadcast_as(shape)?.contiguous()?;
    let floor = Tensor::full(-1e30f64, shape, logits.device())?.to_dtype(logits.dtype())?;
    let masked = keep.where_cond(logits, &floor)?;
    let max = masked.max_keepdim(1)?.detach();
    let exp = masked.broadcast_sub(&max)?.exp()?;
    let zeros = exp.zeros_like()?;
    let exp = keep.where_cond(&exp, &zeros)?;
    let denom = exp.sum_keepdim(1)?;
    // guard for samples without any active channel
    let denom = denom.maximum(1e-30)?;
    Ok(exp.broadcast_div(&denom)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StuffNetConfig {
    /// Output channels of the four residual blocks.
    pub widths: Vec<usize>,
}

impl Default for StuffNetConfig {
    fn default() -> Self {
        Self { widths: vec![64, 32, 32, 16] }
    }
}

/// Modulation from the coarse layout: `x * (1 + gamma(seg)) + beta(seg)`.
#[derive(Clone, Debug)]
struct SegModulation {
    gamma: Conv2d,
    beta: Conv2d,
}

impl SegModulation {
    fn new(b: &mut ParamBuilder, seg_c: usize, c: usize) -> Result<Self> {
        Ok(Self { gamma: Conv2d::new(&mut b.pp("gamma"), seg_c, c, 3)?, beta: Conv2d::new(&mut b.pp("beta"), seg_c, c, 3)? })
    }

    fn forward(&self, x: &Tensor, seg: &Tensor) -> Result<Tensor> {
        let g = self.gamma.forward(seg)?;
        let bt = self.beta.forward(seg)?;
        Ok(((x * (g + 1.0)?)? + bt)?)
    }
}

#[derive(Clone, Debug)]
struct RefineBlock {
    mod1: SegModulation,
    conv1: Conv2d,
    mod2: SegModulation,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl RefineBlock {
    fn new(b: &mut ParamBuilder, seg_c: usize, in_c: usize, out_c: usize) -> Result<Self> {
        Ok(Self {
            mod1: SegModulation::new(&mut b.pp("mod1"), seg_c, in_c)?,
            conv1: Conv2d::new(&mut b.pp("conv1"), in_c, out_c, 3)?,
            mod2: SegModulation::new(&mut b.pp("mod2"), seg_c, out_c)?,
            conv2: Conv2d::new(&mut b.pp("conv2"), out_c, out_c, 3)?,
            skip: if in_c != out_c { Some(Conv2d::new(&mut b.pp("skip"), in_c, out_c, 1)?) } else { None },
        })
    }

    fn forward(&self, x: &Tensor, seg: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.mod1.forward(x, seg)?.relu()?)?;
        let h = self.conv2.forward(&self.mod2.forward(&h, seg)?.relu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

/// Refinement network: latent projected to a coarse grid, then four
/// residual blocks that upsample towards the canvas while being modulated
/// by the (resampled) coarse layout.
#[derive(Clone, Debug)]
pub struct StuffRefiner {
    num_stuff: usize,
    latent_dim: usize,
    base: (usize, usize),
    canvas: (usize, usize),
    stem_c: usize,
    fc: Linear,
    blocks: Vec<RefineBlock>,
    out: Conv2d,
    coarse_gain: candle_core::Var,
}

impl StuffRefiner {
    pub fn new(
        b: &mut ParamBuilder,
        config: &StuffNetConfig,
        num_stuff: usize,
        latent_dim: usize,
        canvas: (usize, usize),
    ) -> Result<Self> {
        if config.widths.len() != 4 {
            return Err(Error::BadConfig(format!("stuff refiner needs 4 block widths, got {}", config.widths.len())));
        }
        let base = ((canvas.0 / 16).max(1), (canvas.1 / 16).max(1));
        let stem_c = config.widths[0];
        let fc = Linear::new(&mut b.pp("fc"), latent_dim, stem_c * base.0 * base.1)?;
        let mut blocks = Vec::new();
        let mut in_c = stem_c;
        for (i, &out_c) in config.widths.iter().enumerate() {
            blocks.push(RefineBlock::new(&mut b.pp(&format!("block{i}")), num_stuff, in_c, out_c)?);
            in_c = out_c;
        }
        let out = Conv2d::new(&mut b.pp("out"), in_c, num_stuff, 3)?;
        let coarse_gain = b.constant("coarse_gain", &[1], 2.0)?;
        Ok(Self { num_stuff, latent_dim, base, canvas, stem_c, fc, blocks, out, coarse_gain })
    }

    /// `(B, K, H, W)` coarse masks and `(B, m)` latents to raw logits of the
    /// same shape as the coarse masks.
    pub fn forward(&self, coarse: &Tensor, z: &Tensor) -> Result<Tensor> {
        let (bsz, k, h, w) = coarse.dims4()?;
        if k != self.num_stuff || (h, w) != self.canvas {
            return Err(Error::ShapeMismatch(format!(
                "coarse layout {k}x{h}x{w}, expected {}x{}x{}",
                self.num_stuff, self.canvas.0, self.canvas.1
            )));
        }
        let (zb, zd) = z.dims2()?;
        if zb != bsz {
            return Err(Error::ShapeMismatch(format!("{zb} stuff latents for {bsz} layouts")));
        }
        if zd != self.latent_dim {
            return Err(Error::LatentDimMismatch { got: zd, expected: self.latent_dim });
        }
        let mut x = self.fc.forward(z)?.reshape((bsz, self.stem_c, self.base.0, self.base.1))?;
        for block in &self.blocks {
            let (_, _, xh, xw) = x.dims4()?;
            let (th, tw) = ((xh * 2).min(h), (xw * 2).min(w));
            if (th, tw) != (xh, xw) {
                x = x.upsample_nearest2d(th, tw)?;
            }
            let seg = crate::nn::resample_area(coarse, th, tw)?;
            x = block.forward(&x, &seg)?;
        }
        let (_, _, xh, xw) = x.dims4()?;
        if (xh, xw) != (h, w) {
            x = x.upsample_nearest2d(h, w)?;
        }
        let logits = self.out.forward(&x.relu()?)?;
        Ok(logits.broadcast_add(&coarse.broadcast_mul(self.coarse_gain.as_tensor())?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Kind;

    fn taxonomy() -> Taxonomy {
        Taxonomy::from_names(&[("sky", Kind::Stuff), ("grass", Kind::Stuff), ("dog", Kind::Thing)]).unwrap()
    }

    fn channel_sum(layout: &CoarseStuffLayout, ch: usize) -> f64 {
        layout.masks.get(ch).unwrap().sum_all().unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn max_size_covers_canvas() {
        let t = taxonomy();
        let o = ObjectSpec { category: 0, cx: 0.5, cy: 0.5, size: 25 };
        let l = build_coarse_stuff_layout(&[o], &t, 25, 64, 64, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(channel_sum(&l, 0), 4096.0);
        assert_eq!(channel_sum(&l, 1), 0.0);
        assert_eq!(l.active, vec![0]);
    }

    #[test]
    fn corner_square_is_quartered() {
        // size 4 of 25 gives a 26 pixel side on 64x64
        let t = taxonomy();
        let o = ObjectSpec { category: 1, cx: 0.0, cy: 0.0, size: 4 };
        let l = build_coarse_stuff_layout(&[o], &t, 25, 64, 64, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(channel_sum(&l, 1), (26.0 * 26.0) / 4.0);
    }

    #[test]
    fn duplicate_categories_merge_by_union() {
        let t = taxonomy();
        let a = ObjectSpec { category: 0, cx: 0.25, cy: 0.5, size: 4 };
        let b = ObjectSpec { category: 0, cx: 0.75, cy: 0.5, size: 4 };
        let both = build_coarse_stuff_layout(&[a, b], &t, 25, 64, 64, DType::F32, &Device::Cpu).unwrap();
        let la = build_coarse_stuff_layout(&[a], &t, 25, 64, 64, DType::F32, &Device::Cpu).unwrap();
        let lb = build_coarse_stuff_layout(&[b], &t, 25, 64, 64, DType::F32, &Device::Cpu).unwrap();
        let union = la.masks.maximum(&lb.masks).unwrap();
        let diff = (both.masks - union).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
        assert_eq!(both.active, vec![0]);
    }

    #[test]
    fn thing_in_stuff_branch_is_rejected() {
        let t = taxonomy();
        let o = ObjectSpec { category: 2, cx: 0.5, cy: 0.5, size: 4 };
        let err = build_coarse_stuff_layout(&[o], &t, 25, 64, 64, DType::F32, &Device::Cpu).unwrap_err();
        assert_eq!(err.name(), "ThingObjectPassed");
    }

    #[test]
    fn softmax_closed_forms() {
        let dev = Device::Cpu;
        // channel 0: 0, channel 1: ln 2, channel 2: inactive with a huge logit
        let logits = Tensor::from_vec(vec![0.0f64, 2f64.ln(), 1e6], (3, 1, 1), &dev).unwrap();
        let out = masked_softmax(&logits, &[0, 1]).unwrap().masks.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!((out[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((out[1] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(out[2], 0.0);

        let equal = Tensor::zeros((2, 4, 4), DType::F32, &dev).unwrap();
        let out = masked_softmax(&equal, &[0, 1]).unwrap().masks.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(out.iter().all(|v| *v == 0.5));

        assert_eq!(masked_softmax(&equal, &[]).unwrap_err().name(), "EmptyActiveSet");
    }
}
