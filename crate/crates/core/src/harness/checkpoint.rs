//! Checkpoint directory: `manifest.json` plus one SNRT file per parameter.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::diffcore::{snrt, Tensor};
use crate::error::{Error, Result};
use crate::evalkit::EvalReport;
use crate::model::{Model, ModelConfig};

pub const MANIFEST: &str = "manifest.json";
const PARAM_DIR: &str = "params";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub epoch: usize,
    pub step: usize,
    pub config_hash: String,
    #[serde(default)]
    pub metrics: Option<EvalReport>,
    pub params: Vec<ParamEntry>,
}

fn json_err(path: &Path, e: serde_json::Error) -> Error {
    Error::Checkpoint(format!("{}: {e}", path.display()))
}

/// Writes `model` under `dir`, replacing any previous checkpoint there.
pub fn save_checkpoint(
    dir: &Path,
    model: &Model,
    train: &TrainConfig,
    epoch: usize,
    step: usize,
    metrics: Option<EvalReport>,
) -> Result<CheckpointManifest> {
    let pdir = dir.join(PARAM_DIR);
    fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
    let mut params = Vec::with_capacity(model.params().len());
    for (_, p) in model.params().iter() {
        let file = format!("{PARAM_DIR}/{}.snrt", p.name);
        snrt::write_file(dir.join(&file), &p.value)?;
        params.push(ParamEntry {
            name: p.name.clone(),
            file,
            shape: p.value.shape().to_vec(),
            trainable: p.trainable,
        });
    }
    let manifest = CheckpointManifest {
        train: train.clone(),
        model: model.config().clone(),
        epoch,
        step,
        config_hash: train.hash(),
        metrics,
        params,
    };
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Rebuilds the model stored under `dir`.
pub fn load_checkpoint(dir: &Path) -> Result<(Model, CheckpointManifest)> {
    let path: PathBuf = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| json_err(&path, e))?;
    let mut model = Model::build(manifest.model.clone())?;
    let mut values: Vec<(String, Tensor)> = Vec::with_capacity(manifest.params.len());
    for entry in &manifest.params {
        let t = snrt::read_file(dir.join(&entry.file))?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "{}: file shape {:?}, manifest {:?}",
                entry.name,
                t.shape(),
                entry.shape
            )));
        }
        values.push((entry.name.clone(), t));
    }
    if values.len() != model.params().len() {
        return Err(Error::Checkpoint(format!(
            "{} stored parameters, model has {}",
            values.len(),
            model.params().len()
        )));
    }
    model.load_values(|name| values.iter().find(|(n, _)| n == name).map(|(_, t)| t))?;
    Ok((model, manifest))
}
