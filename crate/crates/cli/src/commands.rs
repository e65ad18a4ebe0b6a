//! Subcommand implementations. Each returns a JSON summary for stdout.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device};
use plgan_core::checkpoint::{check_taxonomy, load_checkpoint, save_checkpoint, Extras};
use plgan_core::data::{sample_to_scene, synth_shapes_dataset, write_annotations, SynthConfig};
use plgan_core::eval::{coverage_batch, export_results, perturbation_sweep, ImageScorer, MeanIntensityScorer, SweepConfig};
use plgan_core::plg::{dump_layout, LayoutMode};
use plgan_core::render::{layout_preview, save_png, tensor_to_image};
use plgan_core::scene::{Scene, Taxonomy};
use plgan_core::training::{StepLog, Trainer};
use plgan_core::{Error, Model, ModelConfig, Result};
use serde_json::{json, Value};

use crate::config::{RunConfig, SampleSource};

pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const LOG_FILE: &str = "train_log.csv";

/// First sample index used for held-out evaluation of synthetic data.
const HELD_OUT_OFFSET: u64 = 1 << 40;

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::io(path, e),
    })
}

fn load_model(path: &Path) -> Result<Model> {
    Ok(load_checkpoint(path, &Device::Cpu)?.model)
}

/// Keep the header and the rows of steps `<= step`, so a resumed run does
/// not duplicate rows written after its checkpoint.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    let text = read_text(path)?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0
            || line.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= step);
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub struct TrainOptions {
    pub config: PathBuf,
    pub resume: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub steps: Option<u64>,
}

/// Train per a run config; writes the CSV log and checkpoints into the
/// output directory.
pub fn train(opts: &TrainOptions) -> Result<Value> {
    let mut config = RunConfig::load(&opts.config)?;
    if let Some(d) = &opts.output_dir {
        config.output_dir = d.clone();
    }
    if let Some(s) = opts.steps {
        config.train.steps = s;
    }
    let (source, taxonomy) = SampleSource::open(&config.dataset, config.model.resolution)?;
    let out = &config.output_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join(LOG_FILE);
    let ckpt = out.join(CHECKPOINT_FILE);

    let mut trainer = match &opts.resume {
        Some(path) => {
            let t = Trainer::resume(path, &Device::Cpu)?;
            check_taxonomy(t.model(), &taxonomy.hash())?;
            if log_path.exists() {
                truncate_log(&log_path, t.step())?;
            }
            t
        }
        None => {
            let model = Model::new(&taxonomy, &config.model, config.model_seed, DType::F32, &Device::Cpu)?;
            std::fs::write(&log_path, format!("{}\n", StepLog::CSV_HEADER)).map_err(|e| Error::io(&log_path, e))?;
            Trainer::new(model, config.train.clone())?
        }
    };
    let mut log = OpenOptions::new().append(true).create(true).open(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let batch_size = trainer.config().batch_size;
    let start = Instant::now();
    while trainer.step() < config.train.steps {
        let step = trainer.step();
        let entry = trainer.train_step(&source.batch(step, batch_size))?;
        writeln!(log, "{}", entry.csv_row()).map_err(|e| Error::io(&log_path, e))?;
        if step % 10 == 0 {
            log::info!(
                "step {} total {:.4} rec {:.4} bbox {:.4} ({:.1}s)",
                entry.step,
                entry.generator_total,
                entry.generator.reconstruction,
                entry.bbox_error,
                start.elapsed().as_secs_f64()
            );
        }
        if config.checkpoint_every > 0 && entry.step % config.checkpoint_every == 0 {
            trainer.save(&ckpt)?;
        }
    }
    trainer.save(&ckpt)?;
    let held_out: Vec<_> = (0..config.eval_samples as u64).map(|i| source.sample(HELD_OUT_OFFSET + i)).collect();
    let bbox_error = trainer.bbox_error(&held_out)?;
    Ok(json!({
        "steps": trainer.step(),
        "checkpoint": ckpt,
        "log": log_path,
        "bbox_error": bbox_error,
        "seconds": start.elapsed().as_secs_f64(),
    }))
}

pub struct InitOptions {
    pub taxonomy: Option<PathBuf>,
    pub model_config: Option<PathBuf>,
    pub resolution: usize,
    pub seed: u64,
    pub out: PathBuf,
}

/// Write a checkpoint with freshly initialized weights. Without a taxonomy
/// file the synthetic shapes taxonomy is used.
pub fn init(opts: &InitOptions) -> Result<Value> {
    let taxonomy = match &opts.taxonomy {
        Some(p) => Taxonomy::load(p)?,
        None => SynthConfig::toy().taxonomy()?,
    };
    let config: ModelConfig = match &opts.model_config {
        Some(p) => serde_json::from_str(&read_text(p)?)?,
        None => ModelConfig::for_resolution(opts.resolution)?,
    };
    let model = Model::new(&taxonomy, &config, opts.seed, DType::F32, &Device::Cpu)?;
    save_checkpoint(&opts.out, &model, &Extras::default())?;
    Ok(json!({
        "checkpoint": opts.out,
        "taxonomy_hash": taxonomy.hash(),
        "resolution": config.resolution,
        "parameters": model.store().num_scalars(),
    }))
}

pub struct SynthOptions {
    pub scene: PathBuf,
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub mode: LayoutMode,
    pub use_gf: bool,
    pub dump_layout: bool,
}

/// Synthesize one scene: `image.png`, `layout.png`, and optionally the raw
/// layout tensors.
pub fn synth(opts: &SynthOptions) -> Result<Value> {
    let model = load_model(&opts.checkpoint)?;
    let scene = Scene::from_json(&read_text(&opts.scene)?)?;
    let valid = model.validate(&scene)?;
    let result = model.synthesize(&[valid], &[opts.seed], opts.mode, opts.use_gf)?;
    let tau = model.config().generator.norm.tau;
    let image_path = opts.out.join("image.png");
    let layout_path = opts.out.join("layout.png");
    save_png(&tensor_to_image(&result.image.get(0)?)?, &image_path)?;
    save_png(&layout_preview(&result.layouts, 0, model.taxonomy(), tau)?, &layout_path)?;
    let mut files = vec![image_path, layout_path];
    if opts.dump_layout {
        dump_layout(&result.layouts, 0, model.taxonomy(), &opts.out, "layout")?;
        files.push(opts.out.join("layout.safetensors"));
        files.push(opts.out.join("layout.json"));
    }
    let boxes: Vec<Value> = result
        .layouts
        .boxes(0)
        .into_iter()
        .map(|(i, c, b)| json!({"object_index": i, "category": c, "cx": b.cx, "cy": b.cy, "h": b.h, "w": b.w}))
        .collect();
    Ok(json!({
        "files": files,
        "coverage": coverage_batch(&result.layouts, tau)?[0],
        "boxes": boxes,
    }))
}

pub struct SweepOptions {
    pub checkpoint: PathBuf,
    pub ranges: Vec<f64>,
    pub seeds: Vec<u64>,
    pub scenes: Option<PathBuf>,
    pub synth_config: Option<PathBuf>,
    pub count: usize,
    pub data_seed: u64,
    pub mode: LayoutMode,
    pub synthesize: bool,
    pub use_gf: bool,
    pub out: PathBuf,
    pub stem: String,
}

/// Scenes for a sweep: an explicit JSON list, or synthetic shapes scenes
/// whose taxonomy the checkpoint must share.
fn sweep_scenes(model: &Model, opts: &SweepOptions) -> Result<(Vec<Scene>, Option<String>)> {
    if let Some(p) = &opts.scenes {
        return Ok((serde_json::from_str(&read_text(p)?)?, None));
    }
    let mut config = match &opts.synth_config {
        Some(p) => serde_json::from_str::<SynthConfig>(&read_text(p)?)?,
        None => SynthConfig::toy(),
    };
    config.resolution = model.config().resolution;
    let data = synth_shapes_dataset(&config, opts.data_seed)?;
    let max_size = model.config().max_size;
    let scenes = (0..opts.count as u64).map(|i| sample_to_scene(&data.sample(i), max_size)).collect();
    Ok((scenes, Some(config.taxonomy()?.hash())))
}

pub fn eval_sweep(opts: &SweepOptions) -> Result<Value> {
    let model = load_model(&opts.checkpoint)?;
    let (scenes, expected) = sweep_scenes(&model, opts)?;
    let config = SweepConfig {
        ranges: opts.ranges.clone(),
        seeds: opts.seeds.clone(),
        mode: opts.mode,
        synthesize: opts.synthesize,
        use_gf: opts.use_gf,
        tau: model.config().generator.norm.tau,
        ..SweepConfig::default()
    };
    let scorer = MeanIntensityScorer;
    let scorers: Vec<&dyn ImageScorer> = if opts.synthesize { vec![&scorer] } else { vec![] };
    let result = perturbation_sweep(&model, expected.as_deref(), &scenes, &config, &scorers)?;
    let files = export_results(&result, &opts.out, &opts.stem)?;
    let aggregates: Vec<Value> = result
        .aggregates()
        .into_iter()
        .map(|a| json!({"range": a.range, "metric": a.metric, "mean": a.mean, "stderr": a.stderr, "n": a.n}))
        .collect();
    Ok(json!({ "files": files, "scenes": scenes.len(), "aggregates": aggregates }))
}

pub struct DatasetOptions {
    pub config: Option<PathBuf>,
    pub count: usize,
    pub seed: u64,
    pub out: PathBuf,
}

/// Write synthetic shapes samples in the annotation interchange format,
/// plus the matching `taxonomy.json`.
pub fn dataset_synth(opts: &DatasetOptions) -> Result<Value> {
    let config = match &opts.config {
        Some(p) => serde_json::from_str::<SynthConfig>(&read_text(p)?)?,
        None => SynthConfig::toy(),
    };
    let data = synth_shapes_dataset(&config, opts.seed)?;
    let samples: Vec<_> = (0..opts.count as u64).map(|i| data.sample(i)).collect();
    let annotations = write_annotations(&opts.out, &samples)?;
    let taxonomy = opts.out.join("taxonomy.json");
    std::fs::write(&taxonomy, config.taxonomy()?.to_json()).map_err(|e| Error::io(&taxonomy, e))?;
    Ok(json!({ "annotations": annotations, "taxonomy": taxonomy, "samples": samples.len() }))
}
