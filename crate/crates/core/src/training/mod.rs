//! Adversarial training: losses, critics and the alternating update loop.

pub mod critics;
pub mod losses;

use std::collections::HashMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use critics::{
    AppearanceCritic, AppearanceDiscriminator, CriticConfig, Discriminators, FeatureExtractor, ImageCritic,
    ImageDiscriminator, ObjectCritic, ObjectDiscriminator, RandomConvExtractor,
};
pub use losses::{
    appearance_losses, bbox_loss, gram_matrix, hinge_disc_loss, hinge_gen_loss, object_losses, perceptual_from_features,
    perceptual_loss, reconstruction_loss, total_generator_loss, total_generator_loss_tensor, AdversarialTerms,
    LossParts, LossWeights, ObjectBoxes, PERCEPTUAL_WEIGHTS,
};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Extras};
use crate::data::{image_batch, sample_to_scene, AnnotatedSample};
use crate::error::{Error, Result};
use crate::fusion::NormMode;
use crate::geometry::{crop_boxes, BBox};
use crate::nn::{Adam, AdamConfig, ParamStore, SeededRng};
use crate::pipeline::Model;
use crate::plg::{route, LayoutBatch, LayoutMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub weights: LossWeights,
    pub optimizer: AdamConfig,
    pub critics: CriticConfig,
    pub mode: LayoutMode,
    pub use_gf: bool,
    pub extractor_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            steps: 500,
            seed: 0,
            weights: LossWeights::default(),
            optimizer: AdamConfig::default(),
            critics: CriticConfig::small(),
            mode: LayoutMode::Panoptic,
            use_gf: true,
            extractor_seed: 1234,
        }
    }
}

/// Scalars recorded for one step.
#[derive(Clone, Debug)]
pub struct StepLog {
    pub step: u64,
    pub generator: LossParts<f64>,
    pub generator_total: f64,
    /// Image, object and appearance discriminator terms.
    pub discriminator: [f64; 3],
    /// Mean absolute error of predicted (h, w) against ground truth.
    pub bbox_error: f64,
}

impl StepLog {
    pub const CSV_HEADER: &'static str =
        "step,g_bbox,g_image,g_object,g_perceptual,g_reconstruction,g_appearance,g_total,d_image,d_object,d_appearance,bbox_error";

    pub fn csv_row(&self) -> String {
        let g = self.generator.as_array().map(|v| v.to_string()).join(",");
        let d = self.discriminator.map(|v| v.to_string()).join(",");
        format!("{},{g},{},{d},{}", self.step, self.generator_total, self.bbox_error)
    }
}

/// Step counter and RNG position; optimizer moments live in the optimizers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub rng_seed: u64,
    /// ChaCha word position, as a decimal string.
    pub rng_word_pos: String,
}

/// Latents of one step: `(B, m)` stuff, `(N, m)` thing and `(B, m)`
/// image codes.
#[derive(Clone, Debug)]
pub struct StepLatents {
    pub stuff: Tensor,
    pub things: Tensor,
    pub image: Tensor,
}

/// Shared forward pass of one step.
pub struct StepForward {
    pub real: Tensor,
    pub fake: Tensor,
    pub layouts: LayoutBatch,
    pub gt_boxes: Vec<BBox>,
    pub gt_extents: Option<Tensor>,
    pub owners: Vec<usize>,
    pub labels: Vec<usize>,
}

impl StepForward {
    fn pred_boxes(&self) -> Vec<BBox> {
        self.layouts.instances.as_ref().map(|i| i.boxes.clone()).unwrap_or_default()
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

pub struct Trainer {
    model: Model,
    config: TrainConfig,
    critic_store: ParamStore,
    critics: Discriminators,
    extractor: RandomConvExtractor,
    opt_g: Adam,
    opt_d: Adam,
    rng: SeededRng,
    step: u64,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        if config.batch_size == 0 {
            return Err(Error::BadConfig("batch size must be positive".into()));
        }
        let (dtype, device) = (model.dtype(), model.device().clone());
        let mut critic_store = ParamStore::new(dtype, &device);
        let mut init = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9));
        let critics =
            Discriminators::new(&mut critic_store.builder("", &mut init), &config.critics, model.taxonomy().len())?;
        let extractor = RandomConvExtractor::new(config.extractor_seed, dtype, &device)?;
        let named = |s: &ParamStore| s.params().iter().map(|(k, v)| (k.clone(), v.clone())).collect::<Vec<_>>();
        let opt_g = Adam::new(config.optimizer, named(model.store()))?;
        let opt_d = Adam::new(config.optimizer, named(&critic_store))?;
        let rng = SeededRng::new(config.seed);
        Ok(Self { model, config, critic_store, critics, extractor, opt_g, opt_d, rng, step: 0 })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn critic_store(&self) -> &ParamStore {
        &self.critic_store
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn state(&self) -> TrainState {
        TrainState { step: self.step, rng_seed: self.rng.seed(), rng_word_pos: self.rng.word_pos().to_string() }
    }

    /// Sample latents and run the generator side once.
    pub fn forward(&mut self, batch: &[AnnotatedSample]) -> Result<StepForward> {
        if batch.is_empty() {
            return Err(Error::BadConfig("empty training batch".into()));
        }
        let (dtype, device) = (self.model.dtype(), self.model.device().clone());
        let max_size = self.model.config().max_size;
        let mut things = 0;
        for sample in batch {
            let scene = self.model.validate(&sample_to_scene(sample, max_size))?;
            things += route(&scene, self.config.mode).1.len();
        }
        let m = self.model.config().latent_dim();
        let latents = StepLatents {
            stuff: self.rng.normal(&[batch.len(), m], dtype, &device)?,
            things: self.rng.normal(&[things, m], dtype, &device)?,
            image: self.rng.normal(&[batch.len(), m], dtype, &device)?,
        };
        self.forward_with(batch, &latents, true)
    }

    /// Generator side with given latents. Running statistics are updated
    /// only when `update_stats` is set.
    pub fn forward_with(&self, batch: &[AnnotatedSample], latents: &StepLatents, update_stats: bool) -> Result<StepForward> {
        if batch.is_empty() {
            return Err(Error::BadConfig("empty training batch".into()));
        }
        let (dtype, device) = (self.model.dtype(), self.model.device().clone());
        let max_size = self.model.config().max_size;
        let mut scenes = Vec::with_capacity(batch.len());
        let mut gt_boxes = Vec::new();
        let mut owners = Vec::new();
        let mut labels = Vec::new();
        for (b, sample) in batch.iter().enumerate() {
            let scene = self.model.validate(&sample_to_scene(sample, max_size))?;
            for (i, o) in route(&scene, self.config.mode).1 {
                gt_boxes.push(sample.objects[i].bbox);
                owners.push(b);
                labels.push(o.category);
            }
            scenes.push(scene);
        }
        let real = image_batch(batch, dtype, &device)?;
        let layouts = self.model.plg().forward(&scenes, &latents.stuff, &latents.things, self.config.mode)?;
        let fake = self.model.generator().forward(
            &layouts,
            &latents.image,
            NormMode::Train { update_stats },
            self.config.use_gf,
        )?;
        let gt_extents = if gt_boxes.is_empty() {
            None
        } else {
            let v: Vec<f64> = gt_boxes.iter().flat_map(|b| [b.h, b.w]).collect();
            Some(Tensor::from_vec(v, (gt_boxes.len(), 2), &device)?.to_dtype(dtype)?)
        };
        Ok(StepForward { real, fake, layouts, gt_boxes, gt_extents, owners, labels })
    }

    fn check_finite(&self, what: &str, values: &[(&str, f64)]) -> Result<()> {
        if values.iter().all(|(_, v)| v.is_finite()) {
            return Ok(());
        }
        let detail = values.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ");
        Err(Error::NonFiniteLoss { step: self.step + 1, detail: format!("{what}: {detail}") })
    }

    /// One critic update on detached fakes. Returns the three terms.
    pub fn discriminator_step(&mut self, fwd: &StepForward) -> Result<[f64; 3]> {
        self.critics.power_iteration()?;
        let fake = fwd.fake.detach();
        let pred = fwd.pred_boxes();
        let boxes = ObjectBoxes {
            real_boxes: &fwd.gt_boxes,
            fake_boxes: &pred,
            owners: &fwd.owners,
            labels: &fwd.labels,
            crop_size: self.config.critics.crop_size,
        };
        let d_img = hinge_disc_loss(&self.critics.image.score(&fwd.real)?, &self.critics.image.score(&fake)?)?;
        let d_obj = object_losses(&fwd.real, &fake, &boxes, &self.critics.object)?.discriminator;
        let d_app = appearance_losses(&fwd.real, &fake, &boxes, &self.critics.appearance)?.discriminator;
        let values = [scalar(&d_img)?, scalar(&d_obj)?, scalar(&d_app)?];
        self.check_finite("discriminator", &[("image", values[0]), ("object", values[1]), ("appearance", values[2])])?;
        let total = ((d_img + d_obj)? + d_app)?;
        self.opt_d.step(&total.backward()?)?;
        Ok(values)
    }

    /// Generator-side loss terms for a forward pass.
    pub fn generator_losses(&self, fwd: &StepForward) -> Result<LossParts<Tensor>> {
        let zero = Tensor::zeros((), fwd.fake.dtype(), fwd.fake.device())?;
        let image = hinge_gen_loss(&self.critics.image.score(&fwd.fake)?)?;
        let (object, appearance) = if fwd.labels.is_empty() {
            (zero.clone(), zero.clone())
        } else {
            let crops = crop_boxes(&fwd.fake, &fwd.pred_boxes(), &fwd.owners, self.config.critics.crop_size)?;
            let object = hinge_gen_loss(&self.critics.object.score(&crops, &fwd.labels)?)?;
            let feats = self.critics.appearance.features(&crops)?;
            let cond = feats.mean(candle_core::D::Minus1)?.mean(candle_core::D::Minus1)?;
            let appearance = hinge_gen_loss(&self.critics.appearance.score(&gram_matrix(&feats)?, &cond, &fwd.labels)?)?;
            (object, appearance)
        };
        let real_feats: Vec<Tensor> = self.extractor.features(&fwd.real)?.into_iter().map(|t| t.detach()).collect();
        let perceptual = perceptual_from_features(&real_feats, &self.extractor.features(&fwd.fake)?)?;
        let reconstruction = reconstruction_loss(&fwd.real, &fwd.fake)?;
        let bbox = match (&fwd.layouts.instances, &fwd.gt_extents) {
            (Some(inst), Some(gt)) => bbox_loss(&inst.extents, gt)?,
            _ => zero,
        };
        Ok(LossParts { bbox, image, object, perceptual, reconstruction, appearance })
    }

    /// One generator and layout-generator update.
    pub fn generator_step(&mut self, fwd: &StepForward) -> Result<(LossParts<f64>, f64)> {
        let parts = self.generator_losses(fwd)?;
        let values = LossParts::from_array(parts.as_array().map(|t| scalar(t).unwrap_or(f64::NAN)));
        let total = total_generator_loss_tensor(&parts, &self.config.weights)?;
        let total_v = scalar(&total)?;
        let names = ["bbox", "image", "object", "perceptual", "reconstruction", "appearance", "total"];
        let vals: Vec<(&str, f64)> =
            names.iter().copied().zip(values.as_array().into_iter().copied().chain([total_v])).collect();
        self.check_finite("generator", &vals)?;
        self.opt_g.step(&total.backward()?)?;
        Ok((values, total_v))
    }

    /// Critic update then generator update on one batch.
    pub fn train_step(&mut self, batch: &[AnnotatedSample]) -> Result<StepLog> {
        let fwd = self.forward(batch)?;
        let discriminator = self.discriminator_step(&fwd)?;
        let (generator, generator_total) = self.generator_step(&fwd)?;
        let bbox_error = match (&fwd.layouts.instances, &fwd.gt_extents) {
            (Some(inst), Some(gt)) => scalar(&(&inst.extents - gt)?.abs()?.mean_all()?)?,
            _ => 0.0,
        };
        self.step += 1;
        Ok(StepLog { step: self.step, generator, generator_total, discriminator, bbox_error })
    }

    /// Mean |(h, w) error| of the current box predictor on `samples`.
    pub fn bbox_error(&mut self, samples: &[AnnotatedSample]) -> Result<f64> {
        let max_size = self.model.config().max_size;
        let (dtype, device) = (self.model.dtype(), self.model.device().clone());
        let m = self.model.config().latent_dim();
        let mut objs = Vec::new();
        let mut gt = Vec::new();
        for sample in samples {
            let scene = self.model.validate(&sample_to_scene(sample, max_size))?;
            for (i, o) in route(&scene, self.config.mode).1 {
                objs.push(o);
                gt.extend([sample.objects[i].bbox.h, sample.objects[i].bbox.w]);
            }
        }
        if objs.is_empty() {
            return Ok(0.0);
        }
        let mut rng = SeededRng::new(self.config.seed ^ 0x5eed);
        let z = rng.normal(&[objs.len(), m], dtype, &device)?;
        let pred = self.model.plg().instance_net().predict_extents(&objs, &z)?;
        let gt = Tensor::from_vec(gt, (objs.len(), 2), &device)?.to_dtype(dtype)?;
        scalar(&(pred - gt)?.abs()?.mean_all()?)
    }

    fn extras(&self) -> Result<Extras> {
        let mut tensors: Vec<(String, Tensor)> =
            self.critic_store.named_tensors().into_iter().map(|(k, t)| (format!("critic/{k}"), t)).collect();
        tensors.extend(self.opt_g.named_moments("adam_g"));
        tensors.extend(self.opt_d.named_moments("adam_d"));
        let mut metadata = HashMap::new();
        metadata.insert("train_config".into(), serde_json::to_string(&self.config)?);
        metadata.insert("train_state".into(), serde_json::to_string(&self.state())?);
        metadata.insert("adam_steps".into(), format!("{},{}", self.opt_g.steps(), self.opt_d.steps()));
        Ok(Extras { tensors, metadata })
    }

    /// Write model, critics, optimizer moments and training state.
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.model, &self.extras()?)
    }

    /// Continue from an archive written by [`Self::save`].
    pub fn resume(path: &Path, device: &Device) -> Result<Self> {
        let loaded = load_checkpoint(path, device)?;
        let meta = |k: &str| {
            loaded.metadata.get(k).ok_or_else(|| Error::BadCheckpoint(format!("{k} missing; not a training checkpoint")))
        };
        let config: TrainConfig = serde_json::from_str(meta("train_config")?)?;
        let state: TrainState = serde_json::from_str(meta("train_state")?)?;
        let (g_steps, d_steps) = meta("adam_steps")?
            .split_once(',')
            .and_then(|(a, b)| Some((a.parse::<u64>().ok()?, b.parse::<u64>().ok()?)))
            .ok_or_else(|| Error::BadCheckpoint("bad adam_steps".into()))?;
        let word_pos: u128 =
            state.rng_word_pos.parse().map_err(|_| Error::BadCheckpoint("bad rng position".into()))?;
        let mut trainer = Trainer::new(loaded.model, config)?;
        let critic: HashMap<String, Tensor> = loaded
            .extras
            .iter()
            .filter_map(|(k, t)| k.strip_prefix("critic/").map(|s| (s.to_string(), t.clone())))
            .collect();
        trainer.critic_store.load_named(&critic)?;
        trainer.opt_g.load_moments("adam_g", &loaded.extras, g_steps)?;
        trainer.opt_d.load_moments("adam_d", &loaded.extras, d_steps)?;
        trainer.rng = SeededRng::restore(state.rng_seed, word_pos);
        trainer.step = state.step;
        Ok(trainer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_row_has_every_column() {
        let log = StepLog {
            step: 3,
            generator: LossParts::from_array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            generator_total: 7.0,
            discriminator: [8.0, 9.0, 10.0],
            bbox_error: 0.5,
        };
        let cols = StepLog::CSV_HEADER.split(',').count();
        assert_eq!(log.csv_row().split(',').count(), cols);
        assert_eq!(cols, 12);
    }
}
