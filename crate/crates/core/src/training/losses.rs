use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use super::critics::{AppearanceCritic, FeatureExtractor, ObjectCritic};
use crate::error::{Error, Result};
use crate::geometry::{crop_boxes, BBox};

/// Weights of the six generator loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub bbox: f64,
    pub image: f64,
    pub object: f64,
    pub perceptual: f64,
    pub reconstruction: f64,
    pub appearance: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { bbox: 1.0, image: 0.1, object: 1.0, perceptual: 1.0, reconstruction: 1.0, appearance: 1.0 }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 6] {
        [self.bbox, self.image, self.object, self.perceptual, self.reconstruction, self.appearance]
    }
}

/// Generator loss terms in weight order: box, image, object, perceptual,
/// reconstruction, appearance.
#[derive(Clone, Debug)]
pub struct LossParts<T> {
    pub bbox: T,
    pub image: T,
    pub object: T,
    pub perceptual: T,
    pub reconstruction: T,
    pub appearance: T,
}

impl<T> LossParts<T> {
    pub fn as_array(&self) -> [&T; 6] {
        [&self.bbox, &self.image, &self.object, &self.perceptual, &self.reconstruction, &self.appearance]
    }
}

impl LossParts<f64> {
    pub fn from_array(v: [f64; 6]) -> Self {
        Self { bbox: v[0], image: v[1], object: v[2], perceptual: v[3], reconstruction: v[4], appearance: v[5] }
    }
}

/// Weighted sum of scalar parts.
pub fn total_generator_loss(parts: &LossParts<f64>, weights: &LossWeights) -> f64 {
    parts.as_array().iter().zip(weights.as_array()).map(|(p, w)| *p * w).sum()
}

/// Weighted sum of scalar tensor parts.
pub fn total_generator_loss_tensor(parts: &LossParts<Tensor>, weights: &LossWeights) -> Result<Tensor> {
    let mut total = (parts.bbox.clone() * weights.bbox)?;
    for (p, w) in parts.as_array().into_iter().zip(weights.as_array()).skip(1) {
        total = (total + (p * w)?)?;
    }
    Ok(total)
}

fn scalar_zero(like: &Tensor) -> Result<Tensor> {
    Ok(Tensor::zeros((), like.dtype(), like.device())?)
}

fn mean_or_zero(x: &Tensor) -> Result<Tensor> {
    if x.elem_count() == 0 {
        return scalar_zero(x);
    }
    Ok(x.flatten_all()?.mean(0)?)
}

/// `mean(max(0, 1 - real)) + mean(max(0, 1 + fake))`.
pub fn hinge_disc_loss(real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    let r = mean_or_zero(&(1.0 - real)?.relu()?)?;
    let f = mean_or_zero(&(fake + 1.0)?.relu()?)?;
    Ok((r + f)?)
}

/// `-mean(fake)`.
pub fn hinge_gen_loss(fake: &Tensor) -> Result<Tensor> {
    Ok(mean_or_zero(fake)?.neg()?)
}

/// Mean absolute difference.
pub fn reconstruction_loss(real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    if real.dims() != fake.dims() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", real.dims(), fake.dims())));
    }
    mean_or_zero(&(real - fake)?.abs()?)
}

/// Weights of the five extractor depths, shallow to deep.
pub const PERCEPTUAL_WEIGHTS: [f64; 5] = [1.0 / 32.0, 1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0, 1.0];

/// `sum_j w_j * mean|phi_j(real) - phi_j(fake)|`.
pub fn perceptual_loss(real: &Tensor, fake: &Tensor, extractor: &dyn FeatureExtractor) -> Result<Tensor> {
    let fr = extractor.features(real)?;
    let ff = extractor.features(fake)?;
    perceptual_from_features(&fr, &ff)
}

/// Perceptual loss from precomputed feature lists.
pub fn perceptual_from_features(real: &[Tensor], fake: &[Tensor]) -> Result<Tensor> {
    if real.len() != PERCEPTUAL_WEIGHTS.len() || fake.len() != PERCEPTUAL_WEIGHTS.len() {
        return Err(Error::LengthMismatch { what: "extractor layers", left: real.len(), right: fake.len() });
    }
    let mut total = scalar_zero(&fake[0])?;
    for ((r, f), w) in real.iter().zip(fake).zip(PERCEPTUAL_WEIGHTS) {
        total = (total + (reconstruction_loss(r, f)? * w)?)?;
    }
    Ok(total)
}

/// `(N, C, H, W)` features to `(N, C, C)` Gram matrices `F^T F / (H W)`.
pub fn gram_matrix(features: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = features.dims4()?;
    let f = features.reshape((n, c, h * w))?;
    Ok((f.matmul(&f.t()?)? / (h * w) as f64)?)
}

/// Mean squared error between predicted and ground-truth `(N, 2)` extents.
pub fn bbox_loss(predicted: &Tensor, target: &Tensor) -> Result<Tensor> {
    if predicted.dims() != target.dims() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", predicted.dims(), target.dims())));
    }
    mean_or_zero(&(predicted - target)?.sqr()?)
}

/// Generator and discriminator terms of one adversarial loss.
#[derive(Clone, Debug)]
pub struct AdversarialTerms {
    pub generator: Tensor,
    pub discriminator: Tensor,
}

/// Crops at `real_boxes` / `fake_boxes`, shared labels and owners.
#[derive(Clone, Debug)]
pub struct ObjectBoxes<'a> {
    pub real_boxes: &'a [BBox],
    pub fake_boxes: &'a [BBox],
    pub owners: &'a [usize],
    pub labels: &'a [usize],
    pub crop_size: usize,
}

impl ObjectBoxes<'_> {
    fn check(&self) -> Result<()> {
        let n = self.labels.len();
        for (what, len) in [("real boxes", self.real_boxes.len()), ("fake boxes", self.fake_boxes.len()), ("owners", self.owners.len())] {
            if len != n {
                return Err(Error::LengthMismatch { what, left: len, right: n });
            }
        }
        Ok(())
    }
}

/// Object-level hinge terms. The discriminator term scores `fake` as
/// given, so callers detach it for the discriminator update.
pub fn object_losses(
    real: &Tensor,
    fake: &Tensor,
    boxes: &ObjectBoxes,
    critic: &dyn ObjectCritic,
) -> Result<AdversarialTerms> {
    boxes.check()?;
    if boxes.labels.is_empty() {
        let z = scalar_zero(fake)?;
        return Ok(AdversarialTerms { generator: z.clone(), discriminator: z });
    }
    let rc = crop_boxes(real, boxes.real_boxes, boxes.owners, boxes.crop_size)?;
    let fc = crop_boxes(fake, boxes.fake_boxes, boxes.owners, boxes.crop_size)?;
    let rs = critic.score(&rc, boxes.labels)?;
    let fs = critic.score(&fc, boxes.labels)?;
    Ok(AdversarialTerms { generator: hinge_gen_loss(&fs)?, discriminator: hinge_disc_loss(&rs, &fs)? })
}

/// Appearance hinge terms on Gram matrices of the critic's crop features,
/// each conditioned on the pooled features of its own crop.
pub fn appearance_losses(
    real: &Tensor,
    fake: &Tensor,
    boxes: &ObjectBoxes,
    critic: &dyn AppearanceCritic,
) -> Result<AdversarialTerms> {
    boxes.check()?;
    if boxes.labels.is_empty() {
        let z = scalar_zero(fake)?;
        return Ok(AdversarialTerms { generator: z.clone(), discriminator: z });
    }
    let score = |images: &Tensor, bx: &[BBox]| -> Result<Tensor> {
        let crops = crop_boxes(images, bx, boxes.owners, boxes.crop_size)?;
        let feats = critic.features(&crops)?;
        let cond = feats.mean(D::Minus1)?.mean(D::Minus1)?;
        critic.score(&gram_matrix(&feats)?, &cond, boxes.labels)
    };
    let rs = score(real, boxes.real_boxes)?;
    let fs = score(fake, boxes.fake_boxes)?;
    Ok(AdversarialTerms { generator: hinge_gen_loss(&fs)?, discriminator: hinge_disc_loss(&rs, &fs)? })
}
