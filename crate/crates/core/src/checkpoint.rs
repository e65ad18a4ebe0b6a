//! Single-file checkpoint archive.
//!
//! A safetensors file holding the model's parameters and buffers under
//! `model/`, plus any extra tensors (critics, optimizer moments) a trainer
//! adds. String metadata carries the model config, the taxonomy and its
//! hash, and optional extra JSON entries.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::pipeline::{Model, ModelConfig};
use crate::scene::Taxonomy;

pub const FORMAT: &str = "plgan-checkpoint";
const MODEL_PREFIX: &str = "model/";

/// Everything in an archive besides the model itself.
#[derive(Clone, Debug, Default)]
pub struct Extras {
    pub tensors: Vec<(String, Tensor)>,
    pub metadata: HashMap<String, String>,
}

pub fn save_checkpoint(path: &Path, model: &Model, extras: &Extras) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut meta = extras.metadata.clone();
    meta.insert("format".into(), FORMAT.into());
    meta.insert("model_config".into(), serde_json::to_string(model.config())?);
    meta.insert("taxonomy".into(), model.taxonomy().to_json());
    meta.insert("taxonomy_hash".into(), model.taxonomy().hash());
    meta.insert("dtype".into(), format!("{:?}", model.dtype()).to_lowercase());
    let mut tensors: Vec<(String, Tensor)> =
        model.store().named_tensors().into_iter().map(|(k, t)| (format!("{MODEL_PREFIX}{k}"), t)).collect();
    tensors.extend(extras.tensors.iter().cloned());
    let tmp = path.with_extension("partial");
    safetensors::serialize_to_file(tensors, Some(meta), &tmp)
        .map_err(|e| Error::io(&tmp, std::io::Error::other(e.to_string())))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// A loaded archive: the model plus the remaining tensors and metadata.
#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub model: Model,
    pub extras: HashMap<String, Tensor>,
    pub metadata: HashMap<String, String>,
}

fn parse_dtype(s: &str) -> Result<DType> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(Error::BadCheckpoint(format!("unsupported dtype {other}"))),
    }
}

pub fn load_checkpoint(path: &Path, device: &Device) -> Result<LoadedCheckpoint> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::BadCheckpoint(format!("{}: {e}", path.display())))?;
    let metadata = header.metadata().clone().unwrap_or_default();
    let get = |k: &str| metadata.get(k).ok_or_else(|| Error::BadCheckpoint(format!("missing metadata {k}")));
    if get("format")? != FORMAT {
        return Err(Error::BadCheckpoint(format!("not a {FORMAT} archive")));
    }
    let taxonomy = Taxonomy::from_json(get("taxonomy")?)?;
    if &taxonomy.hash() != get("taxonomy_hash")? {
        return Err(Error::BadCheckpoint("taxonomy hash does not match the stored taxonomy".into()));
    }
    let config: ModelConfig = serde_json::from_str(get("model_config")?)?;
    let dtype = parse_dtype(get("dtype")?)?;
    let mut tensors = candle_core::safetensors::load_buffer(&bytes, device)?;
    let model = Model::new(&taxonomy, &config, 0, dtype, device)?;
    let mut model_tensors = HashMap::new();
    let keys: Vec<String> = tensors.keys().filter(|k| k.starts_with(MODEL_PREFIX)).cloned().collect();
    for k in keys {
        let t = tensors.remove(&k).expect("key listed");
        model_tensors.insert(k[MODEL_PREFIX.len()..].to_string(), t);
    }
    model.store().load_named(&model_tensors)?;
    Ok(LoadedCheckpoint { model, extras: tensors, metadata })
}

/// Fail unless the checkpoint's taxonomy hash equals `expected`.
pub fn check_taxonomy(model: &Model, expected: &str) -> Result<()> {
    let actual = model.taxonomy().hash();
    if actual != expected {
        return Err(Error::CheckpointMismatch { checkpoint: actual, expected: expected.to_string() });
    }
    Ok(())
}
