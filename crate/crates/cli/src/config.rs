//! Run configuration files and the training data source they describe.

use std::path::{Path, PathBuf};

use plgan_core::data::{
    filter_samples, load_annotations, synth_shapes_dataset, AnnotatedSample, DatasetFilter, Split, SynthConfig, SynthShapes,
};
use plgan_core::scene::Taxonomy;
use plgan_core::training::TrainConfig;
use plgan_core::{Error, ModelConfig, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Procedural shapes; sample `i` is a pure function of `(config, seed, i)`.
    SynthShapes { config: SynthConfig, seed: u64 },
    /// An annotation file in the interchange format, filtered and loaded
    /// into memory.
    Annotations {
        path: PathBuf,
        taxonomy: PathBuf,
        #[serde(default)]
        filter: DatasetFilter,
        #[serde(default)]
        split: Split,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub model_seed: u64,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
    /// Write a checkpoint every this many steps; 0 keeps only the final one.
    #[serde(default)]
    pub checkpoint_every: u64,
    /// Samples used for the final box-error report.
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
}

fn default_eval_samples() -> usize {
    64
}

impl RunConfig {
    /// Small shapes run at 64x64.
    pub fn toy() -> Self {
        Self {
            dataset: DatasetSpec::SynthShapes { config: SynthConfig::toy(), seed: 0 },
            model: ModelConfig::toy(),
            model_seed: 0,
            train: TrainConfig::default(),
            output_dir: PathBuf::from("runs/toy"),
            checkpoint_every: 100,
            eval_samples: default_eval_samples(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
        let config: Self = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::BadConfig("batch_size must be positive".into()));
        }
        if let DatasetSpec::SynthShapes { config, .. } = &self.dataset {
            config.validate()?;
            if config.resolution != self.model.resolution {
                return Err(Error::BadConfig(format!(
                    "dataset resolution {} differs from model resolution {}",
                    config.resolution, self.model.resolution
                )));
            }
        }
        Ok(())
    }
}

/// Indexable training samples.
pub enum SampleSource {
    Synth(SynthShapes),
    Loaded(Vec<AnnotatedSample>),
}

impl SampleSource {
    /// Open the dataset, returning it with its taxonomy.
    pub fn open(spec: &DatasetSpec, resolution: usize) -> Result<(Self, Taxonomy)> {
        match spec {
            DatasetSpec::SynthShapes { config, seed } => {
                let taxonomy = config.taxonomy()?;
                Ok((Self::Synth(synth_shapes_dataset(config, *seed)?), taxonomy))
            }
            DatasetSpec::Annotations { path, taxonomy, filter, split } => {
                let taxonomy = Taxonomy::load(taxonomy)?;
                let stream = load_annotations(path, &taxonomy, resolution, resolution)?;
                let samples: Vec<AnnotatedSample> = filter_samples(stream, *filter)
                    .filter(|s| s.as_ref().map_or(true, |s| s.split == *split))
                    .collect::<Result<_>>()?;
                if samples.is_empty() {
                    return Err(Error::BadConfig(format!("{} has no usable {split:?} samples", path.display())));
                }
                Ok((Self::Loaded(samples), taxonomy))
            }
        }
    }

    pub fn sample(&self, index: u64) -> AnnotatedSample {
        match self {
            Self::Synth(d) => d.sample(index),
            Self::Loaded(v) => v[(index % v.len() as u64) as usize].clone(),
        }
    }

    /// The batch consumed at `step` (0-based), so a resumed run sees the
    /// same data as an uninterrupted one.
    pub fn batch(&self, step: u64, size: usize) -> Vec<AnnotatedSample> {
        let start = step * size as u64;
        (start..start + size as u64).map(|i| self.sample(i)).collect()
    }
}
