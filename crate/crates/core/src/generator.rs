//! Layout-to-image generator: a fully connected stem followed by
//! upsampling residual blocks, each normalized with [`IsaNorm`].

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{instance_mass, threshold, IsaNorm, NormConfig, NormMode, ScaledLayouts};
use crate::nn::{resample_area, Conv2d, Linear, ParamBuilder};
use crate::plg::LayoutBatch;
use crate::scene::Taxonomy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    pub stem_width: usize,
    /// Output channels per stage; the stage count is the length.
    pub widths: Vec<usize>,
    pub norm: NormConfig,
}

impl GeneratorConfig {
    /// Five stages for 128x128 output.
    pub fn for_128() -> Self {
        Self { latent_dim: 128, stem_width: 128, widths: vec![128, 128, 64, 32, 16], norm: NormConfig::default() }
    }

    pub fn for_64() -> Self {
        Self { latent_dim: 128, stem_width: 128, widths: vec![128, 64, 32, 16], norm: NormConfig::default() }
    }

    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    /// Output side, `4 * 2^stages`.
    pub fn output_side(&self) -> usize {
        4 << self.stages()
    }

    pub fn upsampling_factor(&self) -> usize {
        1 << self.stages()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.iter().chain([&self.stem_width]).any(|w| *w == 0) {
            return Err(Error::BadConfig("generator widths must be positive and non-empty".into()));
        }
        if self.latent_dim == 0 {
            return Err(Error::BadConfig("latent dimension must be positive".into()));
        }
        Ok(())
    }
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::for_128()
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: IsaNorm,
    conv1: Conv2d,
    norm2: IsaNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(
        b: &mut ParamBuilder,
        norm: &NormConfig,
        taxonomy: &Taxonomy,
        in_c: usize,
        out_c: usize,
    ) -> Result<Self> {
        let (ks, kt) = (taxonomy.num_stuff(), taxonomy.len());
        Ok(Self {
            norm1: IsaNorm::new(&mut b.pp("norm1"), norm, ks, kt, in_c)?,
            conv1: Conv2d::new(&mut b.pp("conv1"), in_c, out_c, 3)?,
            norm2: IsaNorm::new(&mut b.pp("norm2"), norm, ks, kt, out_c)?,
            conv2: Conv2d::new(&mut b.pp("conv2"), out_c, out_c, 3)?,
            skip: if in_c != out_c { Some(Conv2d::new(&mut b.pp("skip"), in_c, out_c, 1)?) } else { None },
        })
    }

    fn forward(&self, x: &Tensor, layouts: &ScaledLayouts, mode: NormMode, use_gf: bool) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let x = x.upsample_nearest2d(h * 2, w * 2)?;
        let y = self.conv1.forward(&self.norm1.forward(&x, layouts, mode, use_gf)?.relu()?)?;
        let y = self.conv2.forward(&self.norm2.forward(&y, layouts, mode, use_gf)?.relu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(&x)?,
            None => x,
        };
        Ok((y + skip)?)
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
    stem: Linear,
    blocks: Vec<ResBlock>,
    out: Conv2d,
}

impl Generator {
    pub fn new(b: &mut ParamBuilder, config: &GeneratorConfig, taxonomy: &Taxonomy) -> Result<Self> {
        config.validate()?;
        let stem = Linear::new(&mut b.pp("stem"), config.latent_dim, config.stem_width * 16)?;
        let mut blocks = Vec::with_capacity(config.stages());
        let mut in_c = config.stem_width;
        for (i, &out_c) in config.widths.iter().enumerate() {
            blocks.push(ResBlock::new(&mut b.pp(&format!("block{i}")), &config.norm, taxonomy, in_c, out_c)?);
            in_c = out_c;
        }
        let out = Conv2d::new(&mut b.pp("out"), in_c, 3, 3)?;
        Ok(Self { config: config.clone(), stem, blocks, out })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// Norm layers in forward order, two per block.
    pub fn norms(&self) -> impl Iterator<Item = &IsaNorm> {
        self.blocks.iter().flat_map(|b| [&b.norm1, &b.norm2])
    }

    /// Resample layouts to a feature resolution.
    pub fn scale_layouts(&self, layouts: &LayoutBatch, size: (usize, usize)) -> Result<ScaledLayouts> {
        let (h, w) = size;
        let stuff = layouts.stuff.as_ref().map(|s| resample_area(&s.masks, h, w)).transpose()?;
        let (instances, foreground) = match &layouts.instances {
            Some(inst) => {
                let n = inst.owner.len();
                let raw = resample_area(&inst.masks.reshape((n, 1, layouts.height, layouts.width))?, h, w)?;
                let mass = instance_mass(&raw, &inst.owner, layouts.batch)?;
                let fg = threshold(&mass, self.config.norm.tau)?;
                (Some((raw, inst.owner.clone(), inst.category.clone())), fg)
            }
            None => (None, Tensor::zeros((layouts.batch, 1, h, w), layouts.dtype, &layouts.device)?),
        };
        Ok(ScaledLayouts { batch: layouts.batch, size, stuff, instances, foreground })
    }

    /// `(B, 3, H, W)` image in [-1, 1] from layouts and `(B, m)` latents.
    pub fn forward(&self, layouts: &LayoutBatch, z: &Tensor, mode: NormMode, use_gf: bool) -> Result<Tensor> {
        let (b, m) = z.dims2()?;
        if m != self.config.latent_dim {
            return Err(Error::LatentDimMismatch { got: m, expected: self.config.latent_dim });
        }
        let side = self.config.output_side();
        if b != layouts.batch || (layouts.height, layouts.width) != (side, side) {
            return Err(Error::ShapeMismatch(format!(
                "{} layouts at {}x{} for {b} latents, generator outputs {side}x{side}",
                layouts.batch, layouts.height, layouts.width
            )));
        }
        let mut x = self.stem.forward(z)?.reshape((b, self.config.stem_width, 4, 4))?;
        for block in &self.blocks {
            let (_, _, h, w) = x.dims4()?;
            let s = self.scale_layouts(layouts, (h * 2, w * 2))?;
            x = block.forward(&x, &s, mode, use_gf)?;
        }
        Ok(self.out.forward(&x.relu()?)?.tanh()?)
    }
}
