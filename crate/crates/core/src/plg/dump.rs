use std::collections::HashMap;
use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::scene::Taxonomy;

use super::LayoutBatch;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SidecarObject {
    pub tensor: String,
    pub object_index: usize,
    pub category: usize,
    pub bbox: BBox,
}

/// JSON written next to a layout dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutSidecar {
    pub height: usize,
    pub width: usize,
    /// Active stuff categories (global ids).
    pub active_stuff: Vec<usize>,
    pub stuff_channels: Vec<String>,
    pub instances: Vec<SidecarObject>,
}

/// Write sample `b` of `layouts` as `<stem>.safetensors` (one f32 tensor
/// per named channel) plus `<stem>.json`.
pub fn dump_layout(layouts: &LayoutBatch, b: usize, taxonomy: &Taxonomy, dir: &Path, stem: &str) -> Result<LayoutSidecar> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::new();
    let mut stuff_channels = Vec::new();
    let mut active_stuff = Vec::new();
    if let Some(stuff) = layouts.stuff_layout(b)? {
        for (ch, &id) in taxonomy.stuff_ids().iter().enumerate() {
            let name = format!("stuff/{}", taxonomy.categories()[id].name);
            tensors.push((name.clone(), stuff.masks.get(ch)?.to_dtype(DType::F32)?));
            stuff_channels.push(name);
        }
        active_stuff = stuff.active.iter().map(|&c| taxonomy.stuff_ids()[c]).collect();
    }
    let mut instances = Vec::new();
    if let Some(inst) = layouts.instance_layout(b)? {
        let boxes = layouts.boxes(b);
        for (slice, (object_index, category, bbox)) in boxes.into_iter().enumerate() {
            let name = format!("instance/{object_index}_{}", taxonomy.categories()[category].name);
            tensors.push((name.clone(), inst.masks.get(slice)?.to_dtype(DType::F32)?));
            instances.push(SidecarObject { tensor: name, object_index, category, bbox });
        }
    }
    let sidecar = LayoutSidecar { height: layouts.height, width: layouts.width, active_stuff, stuff_channels, instances };
    let tensor_path = dir.join(format!("{stem}.safetensors"));
    let mut meta = HashMap::new();
    meta.insert("format".to_string(), "plgan-layout".to_string());
    safetensors::serialize_to_file(tensors, Some(meta), &tensor_path)
        .map_err(|e| Error::io(&tensor_path, std::io::Error::other(e.to_string())))?;
    let json_path = dir.join(format!("{stem}.json"));
    std::fs::write(&json_path, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&json_path, e))?;
    Ok(sidecar)
}
