//! Panoptic layout generation: a stuff branch and an instance branch that
//! together produce the layouts consumed by the image generator.

mod dump;
pub mod instance;
pub mod stuff;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

pub use dump::{dump_layout, LayoutSidecar};
pub use instance::{extents_to_boxes, instance_layout, mask2layout, InstanceLayout, InstanceNet, InstanceNetConfig};
pub use stuff::{
    build_coarse_stuff_layout, masked_softmax, masked_softmax_batch, CoarseStuffLayout, StuffLayout, StuffNetConfig,
    StuffRefiner,
};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nn::ParamBuilder;
use crate::scene::{Kind, LatentCode, ObjectSpec, SceneLatents, Taxonomy, ValidatedScene};

/// Which branches build the layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutMode {
    /// Stuff objects through the stuff branch, things through the instance
    /// branch.
    Panoptic,
    /// Only the stuff branch; things are dropped.
    StuffOnly,
    /// Every object goes through the instance branch.
    InstanceOnly,
}

impl LayoutMode {
    pub const ALL: [LayoutMode; 3] = [LayoutMode::Panoptic, LayoutMode::StuffOnly, LayoutMode::InstanceOnly];

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "panoptic" => Some(Self::Panoptic),
            "stuff_only" | "stuff-only" => Some(Self::StuffOnly),
            "instance_only" | "instance-only" => Some(Self::InstanceOnly),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Panoptic => "panoptic",
            Self::StuffOnly => "stuff_only",
            Self::InstanceOnly => "instance_only",
        }
    }
}

/// Objects routed to each branch, as `(index in scene, object)`.
pub fn route(scene: &ValidatedScene, mode: LayoutMode) -> (Vec<(usize, ObjectSpec)>, Vec<(usize, ObjectSpec)>) {
    let mut stuff = Vec::new();
    let mut inst = Vec::new();
    for (i, (o, k)) in scene.scene().objects.iter().zip(scene.kinds()).enumerate() {
        match (mode, k) {
            (LayoutMode::InstanceOnly, _) | (LayoutMode::Panoptic, Kind::Thing) => inst.push((i, *o)),
            (LayoutMode::StuffOnly, Kind::Thing) => {}
            (_, Kind::Stuff) => stuff.push((i, *o)),
        }
    }
    (stuff, inst)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlgConfig {
    pub instance: InstanceNetConfig,
    pub stuff: StuffNetConfig,
}

impl Default for PlgConfig {
    fn default() -> Self {
        Self { instance: InstanceNetConfig::default(), stuff: StuffNetConfig::default() }
    }
}

/// All instances of a batch of scenes, flattened.
#[derive(Clone, Debug)]
pub struct InstanceBatch {
    /// `(N, H, W)` pasted masks.
    pub masks: Tensor,
    /// `(N, M, M)` masks before pasting.
    pub raw_masks: Tensor,
    /// `(N, 2)` predicted (h, w).
    pub extents: Tensor,
    pub boxes: Vec<BBox>,
    pub owner: Vec<usize>,
    pub category: Vec<usize>,
    /// Index of the object within its scene.
    pub object_index: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct StuffBatch {
    pub coarse: Tensor,
    pub logits: Tensor,
    /// `(B, K, H, W)` normalized layout.
    pub masks: Tensor,
    /// `(B, K)` 0/1 activity flags.
    pub active_flags: Tensor,
    pub active: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct LayoutBatch {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub dtype: DType,
    pub device: Device,
    pub stuff: Option<StuffBatch>,
    pub instances: Option<InstanceBatch>,
}

impl LayoutBatch {
    /// Instance layout of sample `b`.
    pub fn instance_layout(&self, b: usize) -> Result<Option<InstanceLayout>> {
        let Some(inst) = &self.instances else { return Ok(None) };
        let idx: Vec<u32> = inst.owner.iter().enumerate().filter(|(_, o)| **o == b).map(|(i, _)| i as u32).collect();
        if idx.is_empty() {
            return Ok(None);
        }
        let object_ids = idx.iter().map(|&i| inst.object_index[i as usize]).collect();
        let t = Tensor::from_vec(idx.clone(), idx.len(), inst.masks.device())?;
        Ok(Some(InstanceLayout { masks: inst.masks.index_select(&t, 0)?, object_ids }))
    }

    /// Stuff layout of sample `b`.
    pub fn stuff_layout(&self, b: usize) -> Result<Option<StuffLayout>> {
        let Some(s) = &self.stuff else { return Ok(None) };
        if s.active[b].is_empty() {
            return Ok(None);
        }
        Ok(Some(StuffLayout { masks: s.masks.get(b)?, active: s.active[b].clone() }))
    }

    /// Boxes of sample `b` as `(object index, category, box)`.
    pub fn boxes(&self, b: usize) -> Vec<(usize, usize, BBox)> {
        let Some(inst) = &self.instances else { return vec![] };
        (0..inst.boxes.len())
            .filter(|&i| inst.owner[i] == b)
            .map(|i| (inst.object_index[i], inst.category[i], inst.boxes[i]))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct LayoutGenerator {
    taxonomy: Taxonomy,
    config: PlgConfig,
    latent_dim: usize,
    max_size: u32,
    canvas: (usize, usize),
    instance: InstanceNet,
    stuff: StuffRefiner,
}

impl LayoutGenerator {
    pub fn new(
        b: &mut ParamBuilder,
        taxonomy: &Taxonomy,
        config: &PlgConfig,
        latent_dim: usize,
        max_size: u32,
        canvas: (usize, usize),
    ) -> Result<Self> {
        // instance tables cover every category so the instance-only
        // ablation can route stuff objects through this branch
        let instance = InstanceNet::new(&mut b.pp("instance"), &config.instance, taxonomy.len(), latent_dim, max_size)?;
        let stuff = StuffRefiner::new(&mut b.pp("stuff"), &config.stuff, taxonomy.num_stuff(), latent_dim, canvas)?;
        Ok(Self {
            taxonomy: taxonomy.clone(),
            config: config.clone(),
            latent_dim,
            max_size,
            canvas,
            instance,
            stuff,
        })
    }

    pub fn config(&self) -> &PlgConfig {
        &self.config
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn instance_net(&self) -> &InstanceNet {
        &self.instance
    }

    pub fn refiner(&self) -> &StuffRefiner {
        &self.stuff
    }

    fn latent_tensor(&self, z: &LatentCode, dtype: DType, device: &Device) -> Result<Tensor> {
        if z.dim() != self.latent_dim {
            return Err(Error::LatentDimMismatch { got: z.dim(), expected: self.latent_dim });
        }
        Ok(Tensor::from_vec(z.values.clone(), (1, z.dim()), device)?.to_dtype(dtype)?)
    }

    fn require_thing(&self, obj: &ObjectSpec) -> Result<()> {
        match self.taxonomy.kind(obj.category) {
            Some(Kind::Thing) => Ok(()),
            Some(Kind::Stuff) => Err(Error::StuffObjectPassed(obj.category)),
            None => Err(Error::UnknownCategory(obj.category as i64)),
        }
    }

    /// Box for one thing: center copied from the object, extents predicted.
    pub fn predict_bbox(&self, obj: &ObjectSpec, z: &LatentCode, dtype: DType, device: &Device) -> Result<BBox> {
        self.require_thing(obj)?;
        let z = self.latent_tensor(z, dtype, device)?;
        let e = self.instance.predict_extents(std::slice::from_ref(obj), &z)?;
        Ok(extents_to_boxes(std::slice::from_ref(obj), &e)?[0])
    }

    /// `(M, M)` mask for one thing.
    pub fn predict_mask(&self, obj: &ObjectSpec, z: &LatentCode, dtype: DType, device: &Device) -> Result<Tensor> {
        self.require_thing(obj)?;
        let z = self.latent_tensor(z, dtype, device)?;
        Ok(self.instance.predict_masks(std::slice::from_ref(obj), &z)?.squeeze(0)?)
    }

    /// Raw `(K, H, W)` stuff logits for one coarse layout.
    pub fn refine_stuff_layout(&self, coarse: &CoarseStuffLayout, z: &Tensor) -> Result<Tensor> {
        let z = if z.rank() == 1 { z.unsqueeze(0)? } else { z.clone() };
        Ok(self.stuff.forward(&coarse.masks.unsqueeze(0)?, &z)?.squeeze(0)?)
    }

    /// Number of latents the instance branch consumes for `scene`.
    pub fn instance_count(scene: &ValidatedScene, mode: LayoutMode) -> usize {
        route(scene, mode).1.len()
    }

    /// Batched layout generation.
    ///
    /// `z_stuff` is `(B, m)`; `z_inst` is `(N, m)` with one row per routed
    /// instance, in scene order.
    pub fn forward(
        &self,
        scenes: &[ValidatedScene],
        z_stuff: &Tensor,
        z_inst: &Tensor,
        mode: LayoutMode,
    ) -> Result<LayoutBatch> {
        let (h, w) = self.canvas;
        let (dtype, device) = (z_stuff.dtype(), z_stuff.device().clone());
        for s in scenes {
            let c = s.scene().canvas;
            if (c.h, c.w) != (h, w) {
                return Err(Error::ShapeMismatch(format!("scene canvas {}x{}, model expects {h}x{w}", c.h, c.w)));
            }
        }
        let mut stuff_objs = Vec::with_capacity(scenes.len());
        let mut inst_objs = Vec::new();
        let mut owner = Vec::new();
        let mut object_index = Vec::new();
        for (b, s) in scenes.iter().enumerate() {
            let (st, inst) = route(s, mode);
            stuff_objs.push(st.into_iter().map(|(_, o)| o).collect::<Vec<_>>());
            for (i, o) in inst {
                owner.push(b);
                object_index.push(i);
                inst_objs.push(o);
            }
        }

        let stuff = if mode == LayoutMode::InstanceOnly {
            None
        } else {
            let k = self.taxonomy.num_stuff();
            let mut values = Vec::with_capacity(scenes.len() * k * h * w);
            let mut flags = vec![0.0f64; scenes.len() * k];
            let mut active = Vec::with_capacity(scenes.len());
            for (b, objs) in stuff_objs.iter().enumerate() {
                let (v, a) = stuff::coarse_values(objs, &self.taxonomy, self.max_size, h, w)?;
                values.extend(v);
                for &c in &a {
                    flags[b * k + c] = 1.0;
                }
                active.push(a);
            }
            let coarse = Tensor::from_vec(values, (scenes.len(), k, h, w), &device)?.to_dtype(dtype)?;
            let active_flags = Tensor::from_vec(flags, (scenes.len(), k), &device)?.to_dtype(dtype)?;
            let logits = self.stuff.forward(&coarse, z_stuff)?;
            let masks = masked_softmax_batch(&logits, &active_flags)?;
            Some(StuffBatch { coarse, logits, masks, active_flags, active })
        };

        let instances = if inst_objs.is_empty() {
            None
        } else {
            let (zn, _) = z_inst.dims2()?;
            if zn != inst_objs.len() {
                return Err(Error::LengthMismatch { what: "instances vs thing latents", left: inst_objs.len(), right: zn });
            }
            let extents = self.instance.predict_extents(&inst_objs, z_inst)?;
            let raw_masks = self.instance.predict_masks(&inst_objs, z_inst)?;
            let boxes = extents_to_boxes(&inst_objs, &extents)?;
            let masks = mask2layout(&boxes, &raw_masks, h, w)?;
            let category = inst_objs.iter().map(|o| o.category).collect();
            Some(InstanceBatch { masks, raw_masks, extents, boxes, owner, category, object_index })
        };
        Ok(LayoutBatch { batch: scenes.len(), height: h, width: w, dtype, device, stuff, instances })
    }

    /// Layout for a single scene from its seeded latents.
    pub fn layout_scene(
        &self,
        scene: &ValidatedScene,
        latents: &SceneLatents,
        mode: LayoutMode,
        dtype: DType,
        device: &Device,
    ) -> Result<LayoutBatch> {
        let (z_stuff, z_inst) = latent_tensors(std::slice::from_ref(latents), self.latent_dim, dtype, device)?;
        self.forward(std::slice::from_ref(scene), &z_stuff, &z_inst, mode)
    }
}

/// Stack per-scene latents into `(B, m)` stuff and `(N, m)` thing tensors.
pub fn latent_tensors(latents: &[SceneLatents], dim: usize, dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
    let mut stuff = Vec::with_capacity(latents.len() * dim);
    let mut things = Vec::new();
    let mut n = 0;
    for l in latents {
        if l.stuff.dim() != dim {
            return Err(Error::LatentDimMismatch { got: l.stuff.dim(), expected: dim });
        }
        stuff.extend_from_slice(&l.stuff.values);
        for t in &l.things {
            things.extend_from_slice(&t.values);
            n += 1;
        }
    }
    let zs = Tensor::from_vec(stuff, (latents.len(), dim), device)?.to_dtype(dtype)?;
    let zt = Tensor::from_vec(things, (n, dim), device)?.to_dtype(dtype)?;
    Ok((zs, zt))
}
