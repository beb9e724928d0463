//! Checkpoint directories: `meta.json` describing the architecture and the
//! parameter layout, and `params.f64` holding every parameter as
//! little-endian `f64` in registration order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CcagnnModel, ModelConfig, ModelError, NodeClassifier, PlainGat};

pub const META_FILE: &str = "meta.json";
pub const PARAMS_FILE: &str = "params.f64";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: String,
    pub seed: u64,
    pub config: ModelConfig,
    pub params: Vec<ParamEntry>,
    pub num_values: usize,
}

fn err(path: &Path, detail: impl Into<String>) -> ModelError {
    ModelError::Checkpoint { path: path.to_path_buf(), detail: detail.into() }
}

fn io(path: &Path, e: std::io::Error) -> ModelError {
    err(path, e.to_string())
}

pub fn save_checkpoint(dir: &Path, model: &dyn NodeClassifier) -> Result<(), ModelError> {
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let store = model.params();
    let meta = CheckpointMeta {
        model: model.kind().to_string(),
        seed: model.config().seed,
        config: model.config().clone(),
        params: store.iter().map(|(_, p)| ParamEntry { name: p.name.clone(), shape: p.value.shape().to_vec() }).collect(),
        num_values: store.numel(),
    };
    let meta_path = dir.join(META_FILE);
    let mut text = serde_json::to_string_pretty(&meta).map_err(|e| err(&meta_path, e.to_string()))?;
    text.push('\n');
    fs::write(&meta_path, text).map_err(|e| io(&meta_path, e))?;
    let bytes: Vec<u8> = store.flatten().iter().flat_map(|v| v.to_le_bytes()).collect();
    let params_path = dir.join(PARAMS_FILE);
    fs::write(&params_path, bytes).map_err(|e| io(&params_path, e))
}

pub fn read_checkpoint_meta(dir: &Path) -> Result<CheckpointMeta, ModelError> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| err(&path, format!("malformed: {e}")))
}

/// Rebuilds the model described by `meta.json` and loads its parameters.
pub fn load_checkpoint(dir: &Path) -> Result<Box<dyn NodeClassifier>, ModelError> {
    let meta = read_checkpoint_meta(dir)?;
    let mut model: Box<dyn NodeClassifier> = match meta.model.as_str() {
        "ccagnn" => Box::new(CcagnnModel::new(meta.config.clone())?),
        "plain_gat" => Box::new(PlainGat::new(meta.config.clone())?),
        other => return Err(err(&dir.join(META_FILE), format!("unknown model kind `{other}`"))),
    };
    let layout: Vec<ParamEntry> = model
        .params()
        .iter()
        .map(|(_, p)| ParamEntry { name: p.name.clone(), shape: p.value.shape().to_vec() })
        .collect();
    if layout != meta.params {
        return Err(err(&dir.join(META_FILE), "parameter layout does not match the configured architecture"));
    }
    let path: PathBuf = dir.join(PARAMS_FILE);
    let bytes = fs::read(&path).map_err(|e| io(&path, e))?;
    let expected = meta.num_values * 8;
    if bytes.len() != expected {
        return Err(err(&path, format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let flat: Vec<f64> =
        bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect();
    if !model.params_mut().load_flat(&flat) {
        return Err(err(&path, "value count does not match the parameter layout"));
    }
    Ok(model)
}
