use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{conv2d, Conv2d, ParamBuilder};

/// Learned guided filter refining instance masks with image features.
///
/// The feature map is projected to three channels by a 3x3 convolution and
/// averaged into a single guide channel. Local means use a fixed uniform
/// 3x3 kernel with zero padding; the linear coefficient `A` comes from
/// three pointwise layers applied to the two local covariances.
#[derive(Clone, Debug)]
pub struct GuidedFilter {
    proj: Conv2d,
    a1: Conv2d,
    a2: Conv2d,
    a3: Conv2d,
}

/// Every intermediate of one guided-filter pass, `(N, 1, H, W)` each.
#[derive(Clone, Debug)]
pub struct GuidedFilterOutput {
    pub refined: Tensor,
    pub guide: Tensor,
    pub guide_mean: Tensor,
    pub mask_mean: Tensor,
    pub cov_guide: Tensor,
    pub cov_guide_mask: Tensor,
    pub a: Tensor,
    pub b: Tensor,
}

/// Uniform 3x3 average with zero padding on `(N, 1, H, W)`.
pub fn mean_filter3(x: &Tensor) -> Result<Tensor> {
    let k = (Tensor::ones((1, 1, 3, 3), x.dtype(), x.device())? / 9.0)?;
    conv2d(x, &k, 1)
}

impl GuidedFilter {
    pub fn new(b: &mut ParamBuilder, channels: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            proj: Conv2d::new(&mut b.pp("proj"), channels, 3, 3)?,
            a1: Conv2d::new(&mut b.pp("a1"), 2, hidden, 1)?,
            a2: Conv2d::new(&mut b.pp("a2"), hidden, hidden, 1)?,
            a3: Conv2d::new(&mut b.pp("a3"), hidden, 1, 1)?,
        })
    }

    /// Single-channel guide `(B, 1, H, W)` from features `(B, C, H, W)`.
    pub fn guide(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.proj.forward(x)?.mean_keepdim(1)?)
    }

    /// Refine masks `(N, 1, H, W)` against per-mask guides `(N, 1, H, W)`.
    pub fn filter_with_guide(&self, masks: &Tensor, guide: &Tensor) -> Result<GuidedFilterOutput> {
        if masks.dims() != guide.dims() {
            return Err(Error::ShapeMismatch(format!("mask {:?} vs guide {:?}", masks.dims(), guide.dims())));
        }
        let guide_mean = mean_filter3(guide)?;
        let mask_mean = mean_filter3(masks)?;
        let cov_guide = (mean_filter3(&guide.sqr()?)? - guide_mean.sqr()?)?;
        let cov_guide_mask = (mean_filter3(&(guide * masks)?)? - (&guide_mean * &mask_mean)?)?;
        let stats = Tensor::cat(&[&cov_guide, &cov_guide_mask], 1)?;
        let a = self.a1.forward(&stats)?.relu()?;
        let a = self.a2.forward(&a)?.relu()?;
        let a = self.a3.forward(&a)?;
        let b = (&mask_mean - (&a * &guide_mean)?)?;
        let refined = ((&a * masks)? + &b)?;
        Ok(GuidedFilterOutput {
            refined,
            guide: guide.clone(),
            guide_mean,
            mask_mean,
            cov_guide,
            cov_guide_mask,
            a,
            b,
        })
    }

    /// Refine one `(H, W)` mask against features `(C, H, W)`.
    pub fn forward(&self, mask: &Tensor, features: &Tensor) -> Result<GuidedFilterOutput> {
        let (h, w) = mask.dims2()?;
        let (_, fh, fw) = features.dims3()?;
        if (h, w) != (fh, fw) {
            return Err(Error::ShapeMismatch(format!("mask {h}x{w} vs features {fh}x{fw}")));
        }
        let guide = self.guide(&features.unsqueeze(0)?)?;
        self.filter_with_guide(&mask.reshape((1, 1, h, w))?, &guide)
    }
}
