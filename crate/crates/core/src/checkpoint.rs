//! Single-file checkpoints: a safetensors archive whose header metadata holds
//! a JSON manifest (`format`, `version`, model config, architecture and the
//! kind of every named array). Arrays are little-endian f32, row-major.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Architecture, ClipGuidedSam, ModelConfig};
use crate::params::{ParamKind, ParamStore, Tracking};

pub const CHECKPOINT_FORMAT: &str = "clipsam-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST_KEY: &str = "manifest";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoredKind {
    Weight,
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub architecture: Architecture,
    pub kinds: BTreeMap<String, StoredKind>,
    /// Free-form run information (training config, best epoch, ...).
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn save_checkpoint(path: &Path, model: &ClipGuidedSam, extra: serde_json::Value) -> Result<()> {
    let vars = model.store().vars();
    let mut kinds = BTreeMap::new();
    let mut buffers = Vec::with_capacity(vars.len());
    for (name, var, kind) in &vars {
        kinds.insert(name.clone(), if *kind == ParamKind::Weight { StoredKind::Weight } else { StoredKind::Buffer });
        let data = var.as_tensor().flatten_all()?.to_vec1::<f32>()?;
        let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        buffers.push((name.clone(), var.dims().to_vec(), bytes));
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        model: model.config().clone(),
        architecture: model.architecture().clone(),
        kinds,
        extra,
    };
    let views = buffers
        .iter()
        .map(|(n, shape, bytes)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes).map(|v| (n.as_str(), v)).map_err(|e| Error::io(path, e))
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = HashMap::from([(MANIFEST_KEY.to_string(), serde_json::to_string(&manifest)?)]);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    safetensors::serialize_to_file(views, Some(meta), path).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(bytes: &[u8]) -> Result<CheckpointManifest> {
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Load(e.to_string()))?;
    let raw = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(MANIFEST_KEY))
        .ok_or_else(|| Error::Load("archive has no manifest".into()))?;
    let value: serde_json::Value = serde_json::from_str(raw).map_err(|e| Error::Load(e.to_string()))?;
    let version = value.get("version").and_then(|v| v.as_u64()).ok_or_else(|| Error::Load("manifest has no version".into()))?;
    if version != u64::from(CHECKPOINT_VERSION) {
        return Err(Error::VersionMismatch { found: version as u32, expected: CHECKPOINT_VERSION });
    }
    let manifest: CheckpointManifest = serde_json::from_value(value).map_err(|e| Error::Load(e.to_string()))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Load(format!("unexpected format '{}'", manifest.format)));
    }
    Ok(manifest)
}

/// Rebuilds the model; every parameter the architecture declares must be present with the stored shape.
pub fn load_checkpoint(path: &Path) -> Result<(ClipGuidedSam, CheckpointManifest)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let manifest = read_manifest(&bytes)?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Load(e.to_string()))?;
    let store = ParamStore::new(0);
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(Error::Load(format!("`{name}` is {:?}, expected F32", view.dtype())));
        }
        let data: Vec<f32> = view.data().chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let t = candle_core::Tensor::from_vec(data, view.shape(), store.device())?;
        let kind = match manifest.kinds.get(&name) {
            Some(StoredKind::Buffer) => ParamKind::Buffer,
            Some(StoredKind::Weight) => ParamKind::Weight,
            None => return Err(Error::Load(format!("`{name}` is missing from the manifest"))),
        };
        store.insert(&name, &t, kind)?;
    }
    let stored = store.shapes().len();
    let model = ClipGuidedSam::build(&manifest.model, &manifest.architecture, &store, Tracking::None)?;
    if store.shapes().len() != stored {
        let missing: Vec<String> =
            store.shapes().into_iter().map(|(n, _, _)| n).filter(|n| !manifest.kinds.contains_key(n)).collect();
        return Err(Error::Load(format!("checkpoint lacks parameters: {}", missing.join(", "))));
    }
    Ok((model, manifest))
}
