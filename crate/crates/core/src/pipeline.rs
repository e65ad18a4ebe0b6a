//! The inference model: layout generator plus image generator sharing one
//! parameter store.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::NormMode;
use crate::generator::{Generator, GeneratorConfig};
use crate::nn::ParamStore;
use crate::plg::{latent_tensors, LayoutBatch, LayoutGenerator, LayoutMode, PlgConfig};
use crate::scene::{validate_scene, Scene, SceneLatents, SceneRules, Taxonomy, ValidatedScene, DEFAULT_MAX_OBJECTS, DEFAULT_MAX_SIZE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub resolution: usize,
    pub max_size: u32,
    pub max_objects: usize,
    pub plg: PlgConfig,
    pub generator: GeneratorConfig,
}

impl ModelConfig {
    /// Default widths for 64x64 or 128x128 output.
    pub fn for_resolution(resolution: usize) -> Result<Self> {
        let generator = match resolution {
            64 => GeneratorConfig::for_64(),
            128 => GeneratorConfig::for_128(),
            r => return Err(Error::BadConfig(format!("no default generator for resolution {r}"))),
        };
        Ok(Self {
            resolution,
            max_size: DEFAULT_MAX_SIZE,
            max_objects: DEFAULT_MAX_OBJECTS,
            plg: PlgConfig::default(),
            generator,
        })
    }

    /// Narrow 64x64 model sized for CPU training on synthetic shapes.
    pub fn toy() -> Self {
        let mut config = Self::for_resolution(64).expect("64 has defaults");
        config.generator.latent_dim = 64;
        config.generator.stem_width = 64;
        config.generator.widths = vec![64, 32, 16, 8];
        config.generator.norm.embed_std = 1.0;
        config.plg.stuff.widths = vec![32, 16, 16, 8];
        config
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        if self.generator.output_side() != self.resolution {
            return Err(Error::BadConfig(format!(
                "{} generator stages give {}x{} output, resolution is {}",
                self.generator.stages(),
                self.generator.output_side(),
                self.generator.output_side(),
                self.resolution
            )));
        }
        if self.max_size == 0 || self.max_objects == 0 {
            return Err(Error::BadConfig("max_size and max_objects must be positive".into()));
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.generator.latent_dim
    }

    pub fn rules(&self) -> SceneRules {
        SceneRules {
            max_size: self.max_size,
            max_objects: self.max_objects,
            canvas_factor: self.generator.upsampling_factor(),
        }
    }
}

/// Layouts and, when synthesized, the `(B, 3, H, W)` image.
#[derive(Clone, Debug)]
pub struct Synthesis {
    pub layouts: LayoutBatch,
    pub image: Tensor,
}

#[derive(Clone, Debug)]
pub struct Model {
    taxonomy: Taxonomy,
    config: ModelConfig,
    store: ParamStore,
    plg: LayoutGenerator,
    generator: Generator,
}

impl Model {
    /// Fresh model with parameters drawn from `seed`.
    pub fn new(taxonomy: &Taxonomy, config: &ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype, device);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let canvas = (config.resolution, config.resolution);
        let plg = LayoutGenerator::new(
            &mut store.builder("plg", &mut rng),
            taxonomy,
            &config.plg,
            config.latent_dim(),
            config.max_size,
            canvas,
        )?;
        let generator = Generator::new(&mut store.builder("gen", &mut rng), &config.generator, taxonomy)?;
        Ok(Self { taxonomy: taxonomy.clone(), config: config.clone(), store, plg, generator })
    }

    pub fn taxonomy(&self) -> &Taxonomy {
        &self.taxonomy
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn plg(&self) -> &LayoutGenerator {
        &self.plg
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// Validate against the taxonomy and require the model's canvas.
    pub fn validate(&self, scene: &Scene) -> Result<ValidatedScene> {
        let v = validate_scene(scene, &self.taxonomy, &self.config.rules())?;
        let r = self.config.resolution;
        if (scene.canvas.h, scene.canvas.w) != (r, r) {
            return Err(Error::ShapeMismatch(format!(
                "canvas {}x{} does not match the model's {r}x{r}",
                scene.canvas.h, scene.canvas.w
            )));
        }
        Ok(v)
    }

    pub fn latents(&self, scene: &ValidatedScene, seed: u64, mode: LayoutMode) -> SceneLatents {
        SceneLatents::from_seed(seed, self.config.latent_dim(), LayoutGenerator::instance_count(scene, mode))
    }

    /// Layouts for a batch of scenes, scene `i` using latents from `seeds[i]`.
    pub fn layouts(&self, scenes: &[ValidatedScene], seeds: &[u64], mode: LayoutMode) -> Result<LayoutBatch> {
        if scenes.len() != seeds.len() {
            return Err(Error::LengthMismatch { what: "scenes vs seeds", left: scenes.len(), right: seeds.len() });
        }
        let latents: Vec<SceneLatents> = scenes.iter().zip(seeds).map(|(s, &seed)| self.latents(s, seed, mode)).collect();
        let (zs, zt) = latent_tensors(&latents, self.config.latent_dim(), self.dtype(), self.device())?;
        self.plg.forward(scenes, &zs, &zt, mode)
    }

    /// Layouts and images with inference-mode normalization.
    pub fn synthesize(&self, scenes: &[ValidatedScene], seeds: &[u64], mode: LayoutMode, use_gf: bool) -> Result<Synthesis> {
        let layouts = self.layouts(scenes, seeds, mode)?;
        let dim = self.config.latent_dim();
        let mut z = Vec::with_capacity(scenes.len() * dim);
        for (s, &seed) in scenes.iter().zip(seeds) {
            z.extend_from_slice(&self.latents(s, seed, mode).image.values);
        }
        let z = Tensor::from_vec(z, (scenes.len(), dim), self.device())?.to_dtype(self.dtype())?;
        let image = self.generator.forward(&layouts, &z, NormMode::Eval, use_gf)?;
        Ok(Synthesis { layouts, image })
    }
}
