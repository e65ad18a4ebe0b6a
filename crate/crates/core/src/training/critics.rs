//! Discriminators and the frozen perceptual feature extractor.

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{conv2d, ParamBuilder, SnConv2d, SnLinear};

/// Scores whole images, `(B, 3, H, W) -> (B,)`.
pub trait ImageCritic {
    fn score(&self, images: &Tensor) -> Result<Tensor>;
}

/// Scores object crops with their labels, `(N, 3, S, S) -> (N,)`.
pub trait ObjectCritic {
    fn score(&self, crops: &Tensor, labels: &[usize]) -> Result<Tensor>;
}

/// Scores crop Gram matrices with per-crop conditioning.
pub trait AppearanceCritic {
    /// `(N, 3, S, S) -> (N, C, h, w)` trunk features.
    fn features(&self, crops: &Tensor) -> Result<Tensor>;
    /// `(N, C, C)` Gram matrices and `(N, C)` conditioning to `(N,)`.
    fn score(&self, gram: &Tensor, cond: &Tensor, labels: &[usize]) -> Result<Tensor>;
}

/// Activations at five depths, shallow to deep.
pub trait FeatureExtractor {
    fn features(&self, images: &Tensor) -> Result<Vec<Tensor>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticConfig {
    pub image_widths: Vec<usize>,
    pub object_widths: Vec<usize>,
    /// Appearance trunk; the Gram matrices use the last map.
    pub appearance_widths: Vec<usize>,
    pub appearance_hidden: usize,
    pub crop_size: usize,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            image_widths: vec![32, 64, 128, 128, 128],
            object_widths: vec![32, 64, 128],
            appearance_widths: vec![32, 64],
            appearance_hidden: 128,
            crop_size: 32,
        }
    }
}

impl CriticConfig {
    /// Narrow critics for 64x64 desk-scale runs.
    pub fn small() -> Self {
        Self {
            image_widths: vec![16, 32, 64, 64],
            object_widths: vec![16, 32, 64],
            appearance_widths: vec![16, 32],
            appearance_hidden: 64,
            crop_size: 32,
        }
    }
}

/// Stack of `conv3x3 -> relu -> avgpool2` stages.
#[derive(Clone, Debug)]
struct DownTrunk {
    convs: Vec<SnConv2d>,
}

impl DownTrunk {
    fn new(b: &mut ParamBuilder, widths: &[usize]) -> Result<Self> {
        let mut convs = Vec::with_capacity(widths.len());
        let mut in_c = 3;
        for (i, &w) in widths.iter().enumerate() {
            convs.push(SnConv2d::new(&mut b.pp(&format!("conv{i}")), in_c, w, 3)?);
            in_c = w;
        }
        Ok(Self { convs })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for conv in &self.convs {
            x = conv.forward(&x)?.relu()?;
            let (_, _, h, w) = x.dims4()?;
            if h >= 2 && w >= 2 {
                x = x.avg_pool2d(2)?;
            }
        }
        Ok(x)
    }

    fn power_iteration(&self) -> Result<()> {
        self.convs.iter().try_for_each(|c| c.power_iteration())
    }
}

fn label_tensor(labels: &[usize], rows: usize, device: &Device) -> Result<Tensor> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= rows) {
        return Err(Error::CategoryOutOfRange { index: bad, rows });
    }
    Ok(Tensor::from_vec(labels.iter().map(|&l| l as u32).collect::<Vec<_>>(), labels.len(), device)?)
}

/// Projection term `<embed[label], h>` for `(N, C)` features.
fn projection(table: &Var, labels: &[usize], h: &Tensor) -> Result<Tensor> {
    let ids = label_tensor(labels, table.dims()[0], h.device())?;
    let e = table.as_tensor().index_select(&ids, 0)?;
    Ok((e * h)?.sum(D::Minus1)?)
}

#[derive(Clone, Debug)]
pub struct ImageDiscriminator {
    trunk: DownTrunk,
    head: SnLinear,
}

impl ImageDiscriminator {
    pub fn new(b: &mut ParamBuilder, widths: &[usize]) -> Result<Self> {
        let last = *widths.last().ok_or_else(|| Error::BadConfig("image critic needs widths".into()))?;
        Ok(Self { trunk: DownTrunk::new(&mut b.pp("trunk"), widths)?, head: SnLinear::new(&mut b.pp("head"), last, 1)? })
    }

    pub fn power_iteration(&self) -> Result<()> {
        self.trunk.power_iteration()?;
        self.head.power_iteration()
    }
}

impl ImageCritic for ImageDiscriminator {
    fn score(&self, images: &Tensor) -> Result<Tensor> {
        let h = self.trunk.forward(images)?.sum(D::Minus1)?.sum(D::Minus1)?;
        Ok(self.head.forward(&h)?.squeeze(1)?)
    }
}

/// Crop critic with a label projection.
#[derive(Clone, Debug)]
pub struct ObjectDiscriminator {
    trunk: DownTrunk,
    head: SnLinear,
    embed: Var,
}

impl ObjectDiscriminator {
    pub fn new(b: &mut ParamBuilder, widths: &[usize], num_categories: usize) -> Result<Self> {
        let last = *widths.last().ok_or_else(|| Error::BadConfig("object critic needs widths".into()))?;
        let bound = (1.0 / last as f64).sqrt();
        Ok(Self {
            trunk: DownTrunk::new(&mut b.pp("trunk"), widths)?,
            head: SnLinear::new(&mut b.pp("head"), last, 1)?,
            embed: b.uniform("embed", &[num_categories, last], bound)?,
        })
    }

    pub fn power_iteration(&self) -> Result<()> {
        self.trunk.power_iteration()?;
        self.head.power_iteration()
    }
}

impl ObjectCritic for ObjectDiscriminator {
    fn score(&self, crops: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let h = self.trunk.forward(crops)?.sum(D::Minus1)?.sum(D::Minus1)?;
        Ok((self.head.forward(&h)?.squeeze(1)? + projection(&self.embed, labels, &h)?)?)
    }
}

/// Gram-matrix critic. Features come from its own trunk; the score head
/// sees the flattened Gram matrix next to the pooled conditioning.
#[derive(Clone, Debug)]
pub struct AppearanceDiscriminator {
    trunk: DownTrunk,
    hidden: SnLinear,
    head: SnLinear,
    embed: Var,
    channels: usize,
}

impl AppearanceDiscriminator {
    pub fn new(b: &mut ParamBuilder, widths: &[usize], hidden: usize, num_categories: usize) -> Result<Self> {
        let c = *widths.last().ok_or_else(|| Error::BadConfig("appearance critic needs widths".into()))?;
        let bound = (1.0 / hidden as f64).sqrt();
        Ok(Self {
            trunk: DownTrunk::new(&mut b.pp("trunk"), widths)?,
            hidden: SnLinear::new(&mut b.pp("hidden"), c * c + c, hidden)?,
            head: SnLinear::new(&mut b.pp("head"), hidden, 1)?,
            embed: b.uniform("embed", &[num_categories, hidden], bound)?,
            channels: c,
        })
    }

    pub fn power_iteration(&self) -> Result<()> {
        self.trunk.power_iteration()?;
        self.hidden.power_iteration()?;
        self.head.power_iteration()
    }
}

impl AppearanceCritic for AppearanceDiscriminator {
    fn features(&self, crops: &Tensor) -> Result<Tensor> {
        self.trunk.forward(crops)
    }

    fn score(&self, gram: &Tensor, cond: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let (n, c, _) = gram.dims3()?;
        if c != self.channels {
            return Err(Error::ShapeMismatch(format!("gram of {c} channels, critic expects {}", self.channels)));
        }
        let x = Tensor::cat(&[&gram.reshape((n, c * c))?, cond], 1)?;
        let h = self.hidden.forward(&x)?.relu()?;
        Ok((self.head.forward(&h)?.squeeze(1)? + projection(&self.embed, labels, &h)?)?)
    }
}

/// All three discriminators.
#[derive(Clone, Debug)]
pub struct Discriminators {
    pub image: ImageDiscriminator,
    pub object: ObjectDiscriminator,
    pub appearance: AppearanceDiscriminator,
}

impl Discriminators {
    pub fn new(b: &mut ParamBuilder, config: &CriticConfig, num_categories: usize) -> Result<Self> {
        Ok(Self {
            image: ImageDiscriminator::new(&mut b.pp("image"), &config.image_widths)?,
            object: ObjectDiscriminator::new(&mut b.pp("object"), &config.object_widths, num_categories)?,
            appearance: AppearanceDiscriminator::new(
                &mut b.pp("appearance"),
                &config.appearance_widths,
                config.appearance_hidden,
                num_categories,
            )?,
        })
    }

    pub fn power_iteration(&self) -> Result<()> {
        self.image.power_iteration()?;
        self.object.power_iteration()?;
        self.appearance.power_iteration()
    }
}

/// Fixed random convolutional stand-in for a pretrained classifier:
/// `conv1_1` at full resolution, then `conv2_1 .. conv5` each after a 2x
/// average pool. Weights are plain tensors, so nothing here is trained.
#[derive(Clone, Debug)]
pub struct RandomConvExtractor {
    layers: Vec<(Tensor, Tensor)>,
}

impl RandomConvExtractor {
    pub const WIDTHS: [usize; 5] = [8, 16, 32, 32, 32];

    pub fn new(seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(5);
        let mut in_c = 3;
        for out_c in Self::WIDTHS {
            let fan_in = (in_c * 9) as f64;
            let std = (2.0 / fan_in).sqrt();
            let w: Vec<f64> = (0..out_c * in_c * 9).map(|_| StandardNormal.sample(&mut rng)).map(|v: f64| v * std).collect();
            let w = Tensor::from_vec(w, (out_c, in_c, 3, 3), device)?.to_dtype(dtype)?;
            let b = Tensor::zeros(out_c, dtype, device)?;
            layers.push((w, b));
            in_c = out_c;
        }
        Ok(Self { layers })
    }
}

impl FeatureExtractor for RandomConvExtractor {
    fn features(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut x = images.clone();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let (_, _, rows, cols) = x.dims4()?;
            if i > 0 && rows >= 2 && cols >= 2 {
                x = x.avg_pool2d(2)?;
            }
            let c = b.dim(0)?;
            x = conv2d(&x, w, 1)?.broadcast_add(&b.reshape((1, c, 1, 1))?)?.relu()?;
            out.push(x.clone());
        }
        Ok(out)
    }
}
