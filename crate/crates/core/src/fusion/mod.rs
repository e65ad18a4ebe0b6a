//! Instance- and stuff-aware normalization.
//!
//! Features are batch-normalized and then modulated per pixel by
//! `gamma`/`beta` maps. Inside the foreground mask the maps come from the
//! (guided-filtered) instance layout projected through thing embeddings;
//! elsewhere they come from the stuff layout projected through stuff
//! embeddings.

mod guided;

use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

pub use guided::{mean_filter3, GuidedFilter, GuidedFilterOutput};

use crate::error::{Error, Result};
use crate::nn::ParamBuilder;
use crate::plg::InstanceLayout;

/// Guard added to the instance-mass denominator.
pub const EMBED_EPS: f64 = 1e-6;
/// Default foreground threshold.
pub const DEFAULT_TAU: f64 = 0.1;

/// Binary `(H, W)` foreground map.
#[derive(Clone, Debug)]
pub struct ForegroundMask {
    pub mask: Tensor,
    pub tau: f64,
}

/// `1` where the summed instance mass exceeds `tau`.
pub fn foreground_mask(layout: &InstanceLayout, tau: f64) -> Result<ForegroundMask> {
    let (n, h, w) = layout.masks.dims3()?;
    let mask = if n == 0 {
        Tensor::zeros((h, w), layout.masks.dtype(), layout.masks.device())?
    } else {
        threshold(&layout.masks.sum(0)?, tau)?
    };
    Ok(ForegroundMask { mask, tau })
}

/// `(sum > tau)` as a 0/1 tensor of the same dtype, cut from the graph.
pub fn threshold(mass: &Tensor, tau: f64) -> Result<Tensor> {
    Ok(mass.detach().gt(tau)?.to_dtype(mass.dtype())?)
}

/// Learned label embeddings for one normalization layer.
#[derive(Clone, Debug)]
pub struct EmbeddingTables {
    /// `(|C^St|, C)`
    pub stuff_gamma: Var,
    pub stuff_beta: Var,
    /// `(rows, C)`, one row per category that may enter the instance branch.
    pub thing_gamma: Var,
    pub thing_beta: Var,
}

impl EmbeddingTables {
    /// Gamma rows are drawn around one and beta rows around zero with
    /// spread `std`.
    pub fn new(b: &mut ParamBuilder, num_stuff: usize, thing_rows: usize, channels: usize, std: f64) -> Result<Self> {
        Ok(Self {
            stuff_gamma: b.normal("stuff_gamma", &[num_stuff, channels], 1.0, std)?,
            stuff_beta: b.normal("stuff_beta", &[num_stuff, channels], 0.0, std)?,
            thing_gamma: b.normal("thing_gamma", &[thing_rows, channels], 1.0, std)?,
            thing_beta: b.normal("thing_beta", &[thing_rows, channels], 0.0, std)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.stuff_gamma.dims()[1]
    }
}

/// Thing and stuff embeddings, each `(B, C, H, W)`.
#[derive(Clone, Debug)]
pub struct LayoutEmbeddings {
    pub thing_gamma: Tensor,
    pub thing_beta: Tensor,
    pub stuff_gamma: Tensor,
    pub stuff_beta: Tensor,
}

/// Instance stack of a batch, flattened across samples.
#[derive(Clone, Debug)]
pub struct InstanceMaps {
    /// `(N, 1, H, W)` layouts fed to the embedding numerator.
    pub refined: Tensor,
    /// `(N, 1, H, W)` unrefined layouts for the denominator and mask.
    pub raw: Tensor,
    pub owner: Vec<usize>,
    pub category: Vec<usize>,
}

/// `(B, N)` 0/1 ownership matrix.
pub fn ownership(owner: &[usize], batch: usize, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let n = owner.len();
    let mut m = vec![0.0f64; batch * n];
    for (i, &b) in owner.iter().enumerate() {
        m[b * n + i] = 1.0;
    }
    Ok(Tensor::from_vec(m, (batch, n), device)?.to_dtype(dtype)?)
}

/// Per-sample summed instance mass `(B, 1, H, W)`.
pub fn instance_mass(raw: &Tensor, owner: &[usize], batch: usize) -> Result<Tensor> {
    let (n, _, h, w) = raw.dims4()?;
    let s = ownership(owner, batch, raw.dtype(), raw.device())?;
    Ok(s.matmul(&raw.reshape((n, h * w))?)?.reshape((batch, 1, h, w))?)
}

/// Project instance and stuff layouts into embedding space.
///
/// Thing embeddings are the refined-layout-weighted average of the
/// category rows, divided by the raw instance mass plus [`EMBED_EPS`];
/// stuff embeddings are the stuff layout times the stuff table.
pub fn embed_batch(
    batch: usize,
    size: (usize, usize),
    instances: Option<&InstanceMaps>,
    stuff: Option<&Tensor>,
    tables: &EmbeddingTables,
) -> Result<LayoutEmbeddings> {
    let (h, w) = size;
    let c = tables.channels();
    let dtype = tables.stuff_gamma.dtype();
    let device = tables.stuff_gamma.device().clone();
    let zeros = || Tensor::zeros((batch, c, h, w), dtype, &device);

    let (thing_gamma, thing_beta) = match instances {
        Some(inst) if !inst.owner.is_empty() => {
            let n = inst.owner.len();
            let rows = tables.thing_gamma.dims()[0];
            if let Some(&bad) = inst.category.iter().find(|&&c| c >= rows) {
                return Err(Error::CategoryOutOfRange { index: bad, rows });
            }
            let ids = Tensor::from_vec(inst.category.iter().map(|&c| c as u32).collect::<Vec<_>>(), n, &device)?;
            let rows_gb = Tensor::cat(
                &[tables.thing_gamma.as_tensor().index_select(&ids, 0)?, tables.thing_beta.as_tensor().index_select(&ids, 0)?],
                1,
            )?; // (N, 2C)
            let s = ownership(&inst.owner, batch, dtype, &device)?; // (B, N)
            let weighted = s.unsqueeze(2)?.broadcast_mul(&rows_gb.unsqueeze(0)?)?.transpose(1, 2)?.contiguous()?; // (B, 2C, N)
            let refined = inst.refined.reshape((n, h * w))?;
            let numer = weighted.broadcast_matmul(&refined)?; // (B, 2C, HW)
            let denom = (s.matmul(&inst.raw.reshape((n, h * w))?)? + EMBED_EPS)?.unsqueeze(1)?; // (B, 1, HW)
            let e = numer.broadcast_div(&denom)?.reshape((batch, 2 * c, h, w))?;
            (e.narrow(1, 0, c)?, e.narrow(1, c, c)?)
        }
        _ => (zeros()?, zeros()?),
    };

    let (stuff_gamma, stuff_beta) = match stuff {
        Some(layout) => {
            let (b, k, lh, lw) = layout.dims4()?;
            if (b, lh, lw) != (batch, h, w) || k != tables.stuff_gamma.dims()[0] {
                return Err(Error::ShapeMismatch(format!("stuff layout {:?} for {batch}x{h}x{w}", layout.dims())));
            }
            let table = Tensor::cat(&[tables.stuff_gamma.as_tensor(), tables.stuff_beta.as_tensor()], 1)?; // (K, 2C)
            // The CPU matmul mishandles a stride-0 batched left operand, so the
            // shared table is materialized per sample.
            let table = table.t()?.broadcast_left(batch)?.contiguous()?;
            let e = table.matmul(&layout.reshape((batch, k, h * w))?)?; // (B, 2C, HW)
            let e = e.reshape((batch, 2 * c, h, w))?;
            (e.narrow(1, 0, c)?, e.narrow(1, c, c)?)
        }
        None => (zeros()?, zeros()?),
    };
    Ok(LayoutEmbeddings { thing_gamma, thing_beta, stuff_gamma, stuff_beta })
}

/// Single-scene form: `refined` and `raw` are `(n, H, W)`, `stuff` is
/// `(K, H, W)`. Returns embeddings of shape `(C, H, W)`.
pub fn embed_layouts(
    refined: &Tensor,
    raw: &InstanceLayout,
    stuff: Option<&Tensor>,
    tables: &EmbeddingTables,
    thing_categories: &[usize],
) -> Result<LayoutEmbeddings> {
    let (n, h, w) = raw.masks.dims3()?;
    if refined.dim(0)? != thing_categories.len() || n != thing_categories.len() {
        return Err(Error::LengthMismatch {
            what: "instance slices vs categories",
            left: refined.dim(0)?,
            right: thing_categories.len(),
        });
    }
    let inst = InstanceMaps {
        refined: refined.reshape((n, 1, h, w))?,
        raw: raw.masks.reshape((n, 1, h, w))?,
        owner: vec![0; n],
        category: thing_categories.to_vec(),
    };
    let stuff = stuff.map(|s| s.unsqueeze(0)).transpose()?;
    let e = embed_batch(1, (h, w), Some(&inst), stuff.as_ref(), tables)?;
    Ok(LayoutEmbeddings {
        thing_gamma: e.thing_gamma.squeeze(0)?,
        thing_beta: e.thing_beta.squeeze(0)?,
        stuff_gamma: e.stuff_gamma.squeeze(0)?,
        stuff_beta: e.stuff_beta.squeeze(0)?,
    })
}

/// Per-pixel modulation maps.
#[derive(Clone, Debug)]
pub struct AffineMaps {
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// Select thing embeddings where the mask is 1 and stuff embeddings
/// elsewhere. `mask` broadcasts against the embeddings (e.g. `(B,1,H,W)`
/// against `(B,C,H,W)`).
pub fn fuse_affine(mask: &Tensor, emb: &LayoutEmbeddings) -> Result<AffineMaps> {
    let shape = emb.stuff_gamma.shape();
    let m = mask.ne(0.0)?.broadcast_as(shape)?.contiguous()?;
    Ok(AffineMaps {
        gamma: m.where_cond(&emb.thing_gamma, &emb.stuff_gamma)?,
        beta: m.where_cond(&emb.thing_beta, &emb.stuff_beta)?,
    })
}

/// Batch-normalize `(B, C, H, W)` features with their own statistics and
/// apply per-pixel affine maps.
pub fn isa_norm(x: &Tensor, maps: &AffineMaps, eps: f64) -> Result<Tensor> {
    let (mean, var) = batch_stats(x)?;
    normalize_with(x, &mean, &var, maps, eps)
}

/// Per-channel mean and biased variance over (B, H, W), each `(1, C, 1, 1)`.
pub fn batch_stats(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let mean = x.mean_keepdim((0, 2, 3))?;
    let var = x.broadcast_sub(&mean)?.sqr()?.mean_keepdim((0, 2, 3))?;
    Ok((mean, var))
}

fn normalize_with(x: &Tensor, mean: &Tensor, var: &Tensor, maps: &AffineMaps, eps: f64) -> Result<Tensor> {
    let std = (var + eps)?.sqrt()?;
    let normed = x.broadcast_sub(mean)?.broadcast_div(&std)?;
    Ok(normed.broadcast_mul(&maps.gamma)?.broadcast_add(&maps.beta)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; running statistics are updated when `update_stats`.
    Train { update_stats: bool },
    /// Tracked running statistics.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormConfig {
    pub tau: f64,
    pub eps: f64,
    pub momentum: f64,
    pub gf_hidden: usize,
    /// Spread of the initial embedding rows around gamma = 1, beta = 0.
    #[serde(default = "default_embed_std")]
    pub embed_std: f64,
}

fn default_embed_std() -> f64 {
    0.02
}

impl Default for NormConfig {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU, eps: 1e-5, momentum: 0.1, gf_hidden: 16, embed_std: default_embed_std() }
    }
}

/// Layouts resampled to one feature resolution.
#[derive(Clone, Debug)]
pub struct ScaledLayouts {
    pub batch: usize,
    pub size: (usize, usize),
    /// `(B, K, h, w)`
    pub stuff: Option<Tensor>,
    /// `(N, 1, h, w)`
    pub instances: Option<(Tensor, Vec<usize>, Vec<usize>)>,
    /// `(B, 1, h, w)` foreground mask.
    pub foreground: Tensor,
}

/// Normalization layer with its own embeddings, guided filter and running
/// statistics.
#[derive(Clone, Debug)]
pub struct IsaNorm {
    config: NormConfig,
    tables: EmbeddingTables,
    gf: GuidedFilter,
    running_mean: Var,
    running_var: Var,
}

impl IsaNorm {
    pub fn new(b: &mut ParamBuilder, config: &NormConfig, num_stuff: usize, thing_rows: usize, channels: usize) -> Result<Self> {
        Ok(Self {
            config: *config,
            tables: EmbeddingTables::new(&mut b.pp("embed"), num_stuff, thing_rows, channels, config.embed_std)?,
            gf: GuidedFilter::new(&mut b.pp("gf"), channels, config.gf_hidden)?,
            running_mean: b.buffer("running_mean", &[channels], 0.0)?,
            running_var: b.buffer("running_var", &[channels], 1.0)?,
        })
    }

    pub fn tables(&self) -> &EmbeddingTables {
        &self.tables
    }

    pub fn guided_filter(&self) -> &GuidedFilter {
        &self.gf
    }

    /// Affine maps for features `x` at this layer's resolution.
    pub fn affine_maps(&self, x: &Tensor, layouts: &ScaledLayouts, use_gf: bool) -> Result<AffineMaps> {
        let instances = match &layouts.instances {
            Some((raw, owner, category)) => {
                let refined = if use_gf {
                    let guide = self.gf.guide(x)?;
                    let idx = Tensor::from_vec(owner.iter().map(|&o| o as u32).collect::<Vec<_>>(), owner.len(), x.device())?;
                    let guide = guide.index_select(&idx, 0)?;
                    self.gf.filter_with_guide(raw, &guide)?.refined
                } else {
                    raw.clone()
                };
                Some(InstanceMaps { refined, raw: raw.clone(), owner: owner.clone(), category: category.clone() })
            }
            None => None,
        };
        let emb = embed_batch(layouts.batch, layouts.size, instances.as_ref(), layouts.stuff.as_ref(), &self.tables)?;
        fuse_affine(&layouts.foreground, &emb)
    }

    pub fn forward(&self, x: &Tensor, layouts: &ScaledLayouts, mode: NormMode, use_gf: bool) -> Result<Tensor> {
        let maps = self.affine_maps(x, layouts, use_gf)?;
        let c = x.dim(1)?;
        match mode {
            NormMode::Train { update_stats } => {
                let (mean, var) = batch_stats(x)?;
                if update_stats {
                    let n = x.elem_count() / c;
                    let unbiased = if n > 1 { (var.detach() * (n as f64 / (n - 1) as f64))? } else { var.detach() };
                    let m = self.config.momentum;
                    let rm = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach().flatten_all()? * m)?)?;
                    let rv = ((self.running_var.as_tensor() * (1.0 - m))? + (unbiased.flatten_all()? * m)?)?;
                    self.running_mean.set(&rm)?;
                    self.running_var.set(&rv)?;
                }
                normalize_with(x, &mean, &var, &maps, self.config.eps)
            }
            NormMode::Eval => {
                let mean = self.running_mean.as_tensor().reshape((1, c, 1, 1))?;
                let var = self.running_var.as_tensor().reshape((1, c, 1, 1))?;
                normalize_with(x, &mean, &var, &maps, self.config.eps)
            }
        }
    }
}
