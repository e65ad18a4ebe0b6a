//! Instance branch: per-object box extents and masks, pasted into the
//! canvas.

use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{paste_weights, stack_weights, BBox};
use crate::nn::{sigmoid, Conv2d, Linear, ParamBuilder};
use crate::scene::{side_fraction, ObjectSpec};

/// `(n, H, W)` per-object soft masks on the canvas.
#[derive(Clone, Debug)]
pub struct InstanceLayout {
    pub masks: Tensor,
    /// Index of the source object (within the scene) for each slice.
    pub object_ids: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceNetConfig {
    pub embed_dim: usize,
    pub bbox_hidden: usize,
    /// Side of the predicted masks before pasting.
    pub mask_size: usize,
    pub mask_channels: usize,
}

impl Default for InstanceNetConfig {
    fn default() -> Self {
        Self { embed_dim: 32, bbox_hidden: 64, mask_size: 16, mask_channels: 16 }
    }
}

/// Conditioning features shared by the box and mask predictors: label
/// embedding, center, side fraction of the size index and latent.
#[derive(Clone, Debug)]
pub struct InstanceNet {
    config: InstanceNetConfig,
    latent_dim: usize,
    max_size: u32,
    label_embed: Var,
    bbox_l1: Linear,
    bbox_l2: Linear,
    bbox_out: Linear,
    mask_fc: Linear,
    mask_convs: Vec<Conv2d>,
    mask_out: Conv2d,
}

impl InstanceNet {
    pub fn new(
        b: &mut ParamBuilder,
        config: &InstanceNetConfig,
        num_categories: usize,
        latent_dim: usize,
        max_size: u32,
    ) -> Result<Self> {
        if config.mask_size < 4 || !config.mask_size.is_power_of_two() {
            return Err(Error::BadConfig(format!("mask size {} must be a power of two >= 4", config.mask_size)));
        }
        let label_embed = b.normal("label_embed", &[num_categories, config.embed_dim], 0.0, 1.0)?;
        let in_dim = config.embed_dim + 3 + latent_dim;
        let hidden = config.bbox_hidden;
        let bbox_l1 = Linear::new(&mut b.pp("bbox_l1"), in_dim, hidden)?;
        let bbox_l2 = Linear::new(&mut b.pp("bbox_l2"), hidden, hidden)?;
        let bbox_out = Linear::new(&mut b.pp("bbox_out"), hidden, 2)?;
        let c = config.mask_channels;
        let mask_fc = Linear::new(&mut b.pp("mask_fc"), in_dim, c * 16)?;
        let ups = (config.mask_size / 4).trailing_zeros() as usize;
        let mask_convs =
            (0..ups).map(|i| Conv2d::new(&mut b.pp(&format!("mask_conv{i}")), c, c, 3)).collect::<Result<Vec<_>>>()?;
        let mask_out = Conv2d::new(&mut b.pp("mask_out"), c, 1, 3)?;
        Ok(Self {
            config: config.clone(),
            latent_dim,
            max_size,
            label_embed,
            bbox_l1,
            bbox_l2,
            bbox_out,
            mask_fc,
            mask_convs,
            mask_out,
        })
    }

    pub fn mask_size(&self) -> usize {
        self.config.mask_size
    }

    fn features(&self, objs: &[ObjectSpec], z: &Tensor) -> Result<Tensor> {
        let (n, d) = z.dims2()?;
        if n != objs.len() {
            return Err(Error::LengthMismatch { what: "objects vs thing latents", left: objs.len(), right: n });
        }
        if d != self.latent_dim {
            return Err(Error::LatentDimMismatch { got: d, expected: self.latent_dim });
        }
        let rows = self.label_embed.dims()[0];
        let mut ids = Vec::with_capacity(n);
        let mut geo = Vec::with_capacity(n * 3);
        for o in objs {
            if o.category >= rows {
                return Err(Error::CategoryOutOfRange { index: o.category, rows });
            }
            ids.push(o.category as u32);
            geo.extend([o.cx, o.cy, side_fraction(o.size, self.max_size)]);
        }
        let ids = Tensor::from_vec(ids, n, z.device())?;
        let emb = self.label_embed.as_tensor().index_select(&ids, 0)?;
        let geo = Tensor::from_vec(geo, (n, 3), z.device())?.to_dtype(z.dtype())?;
        Ok(Tensor::cat(&[&emb, &geo, z], 1)?)
    }

    /// `(n, 2)` predicted (h, w) in (0, 1).
    pub fn predict_extents(&self, objs: &[ObjectSpec], z: &Tensor) -> Result<Tensor> {
        let f = self.features(objs, z)?;
        let h = self.bbox_l1.forward(&f)?.relu()?;
        let h = self.bbox_l2.forward(&h)?.relu()?;
        sigmoid(&self.bbox_out.forward(&h)?)
    }

    /// `(n, M, M)` masks in [0, 1].
    pub fn predict_masks(&self, objs: &[ObjectSpec], z: &Tensor) -> Result<Tensor> {
        let f = self.features(objs, z)?;
        let n = objs.len();
        let c = self.config.mask_channels;
        let mut x = self.mask_fc.forward(&f)?.relu()?.reshape((n, c, 4, 4))?;
        for conv in &self.mask_convs {
            let (_, _, h, w) = x.dims4()?;
            x = conv.forward(&x.upsample_nearest2d(h * 2, w * 2)?)?.relu()?;
        }
        let m = self.config.mask_size;
        sigmoid(&self.mask_out.forward(&x)?.reshape((n, m, m))?)
    }
}

/// Combine passthrough centers with predicted `(n, 2)` extents.
pub fn extents_to_boxes(objs: &[ObjectSpec], extents: &Tensor) -> Result<Vec<BBox>> {
    let hw = extents.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    Ok(objs.iter().zip(hw).map(|(o, e)| BBox::new(o.cx, o.cy, e[0], e[1])).collect())
}

/// Paste each `(M, M)` mask into its box on an `H x W` canvas with
/// bilinear resampling. Returns `(n, H, W)`; differentiable in `masks`.
pub fn mask2layout(bboxes: &[BBox], masks: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let n = bboxes.len();
    let (mn, my, mx) = masks.dims3()?;
    if mn != n {
        return Err(Error::LengthMismatch { what: "boxes vs masks", left: n, right: mn });
    }
    let (dtype, device) = (masks.dtype(), masks.device().clone());
    if n == 0 {
        return Ok(Tensor::zeros((0, height, width), dtype, &device)?);
    }
    let mut ys = Vec::with_capacity(n);
    let mut xs = Vec::with_capacity(n);
    for b in bboxes {
        let (sy, sx) = b.pixel_rect(height, width);
        ys.push(paste_weights(&sy, my));
        xs.push(paste_weights(&sx, mx));
    }
    let py = stack_weights(ys, height, my, dtype, &device)?;
    let px = stack_weights(xs, width, mx, dtype, &device)?.transpose(1, 2)?.contiguous()?;
    Ok(py.matmul(&masks.contiguous()?)?.matmul(&px)?)
}

/// Convenience wrapper producing an [`InstanceLayout`] for one scene.
pub fn instance_layout(
    bboxes: &[BBox],
    masks: &Tensor,
    object_ids: Vec<usize>,
    height: usize,
    width: usize,
) -> Result<InstanceLayout> {
    Ok(InstanceLayout { masks: mask2layout(bboxes, masks, height, width)?, object_ids })
}

#[cfg(test)]
mod tests {
    use candle_core::Device;

    use super::*;

    #[test]
    fn ones_mask_fills_centered_block() {
        let masks = Tensor::ones((1, 16, 16), DType::F64, &Device::Cpu).unwrap();
        let out = mask2layout(&[BBox::new(0.5, 0.5, 0.5, 0.5)], &masks, 64, 64).unwrap();
        let v = out.squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        for (y, row) in v.iter().enumerate() {
            for (x, val) in row.iter().enumerate() {
                let inside = (16..48).contains(&y) && (16..48).contains(&x);
                assert_eq!(*val, if inside { 1.0 } else { 0.0 }, "pixel {y},{x}");
            }
        }
    }

    #[test]
    fn empty_lists_give_empty_stack() {
        let masks = Tensor::zeros((0, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let out = mask2layout(&[], &masks, 32, 32).unwrap();
        assert_eq!(out.dims(), &[0, 32, 32]);
    }

    #[test]
    fn length_mismatch() {
        let masks = Tensor::zeros((2, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let err = mask2layout(&[BBox::new(0.5, 0.5, 0.1, 0.1)], &masks, 32, 32).unwrap_err();
        assert_eq!(err.name(), "LengthMismatch");
    }
}
