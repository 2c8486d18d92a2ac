//! Checkpoint directory: `checkpoint.json` plus one raw f32 blob per parameter.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchConfig, FrontendModel};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::features::read_f32_le;

pub const CHECKPOINT_MANIFEST: &str = "checkpoint.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    arch: ArchConfig,
    step: u64,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

fn blob_name(name: &str) -> String {
    format!("{name}.f32")
}

pub fn save_checkpoint(model: &FrontendModel<f32>, step: u64, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = Vec::with_capacity(model.params.len());
    for (name, t) in model.params.iter() {
        let file = blob_name(name);
        let path = dir.join(&file);
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        params.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            file,
        });
    }
    let manifest = Manifest {
        arch: model.config.clone(),
        step,
        params,
    };
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Load a checkpoint; returns the model and the step it was saved at.
pub fn load_checkpoint(dir: &Path) -> Result<(FrontendModel<f32>, u64)> {
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    let mut model = FrontendModel::<f32>::new(manifest.arch, 0)?;
    let expected = model.params.names().to_vec();
    if expected.len() != manifest.params.len() {
        return Err(Error::Checkpoint(format!(
            "{}: {} parameters listed, architecture has {}",
            path.display(),
            manifest.params.len(),
            expected.len()
        )));
    }
    let mut values = Vec::with_capacity(expected.len());
    for (entry, name) in manifest.params.iter().zip(&expected) {
        if &entry.name != name {
            return Err(Error::Checkpoint(format!(
                "{}: parameter `{}` where `{name}` was expected",
                path.display(),
                entry.name
            )));
        }
        let blob = dir.join(&entry.file);
        let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
        let data = read_f32_le(&bytes, &blob)?;
        let t = Tensor::new(entry.shape.clone(), data)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", blob.display())))?;
        values.push(t);
    }
    model
        .params
        .set_all(values)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok((model, manifest.step))
}
