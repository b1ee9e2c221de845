//! Self-describing checkpoints: `<stem>.bmt` holds every parameter as a
//! BMT1 record in store order and `<stem>.json` names them and embeds the
//! architecture config.

use std::path::{Path, PathBuf};

use bimamba_core::model::{build_health_model, build_stage_model, Classifier, HealthModel, HealthModelConfig, StageModel, StageModelConfig};
use bimamba_core::ParamStore;
use serde::{Deserialize, Serialize};

use crate::error::{read, write, Error, Result};
use crate::tensor_io;

pub const SCHEMA: &str = "bimamba-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "config", rename_all = "lowercase")]
pub enum Architecture {
    Stage(StageModelConfig),
    Health(HealthModelConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub schema: String,
    pub architecture: Architecture,
    /// File name of the tensor payload, relative to the manifest.
    pub tensors: String,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug)]
pub enum Model {
    Stage(StageModel),
    Health(HealthModel),
}

impl Model {
    pub fn store(&self) -> &ParamStore {
        match self {
            Model::Stage(m) => m.store(),
            Model::Health(m) => m.store(),
        }
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::Stage(m) => m.store_mut(),
            Model::Health(m) => m.store_mut(),
        }
    }

    pub fn architecture(&self) -> Architecture {
        match self {
            Model::Stage(m) => Architecture::Stage(m.cfg.clone()),
            Model::Health(m) => Architecture::Health(m.cfg.clone()),
        }
    }
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bmt"))
}

pub fn save(stem: &Path, arch: Architecture, store: &ParamStore) -> Result<()> {
    let (json, bmt) = paths(stem);
    let mut payload = Vec::new();
    let mut params = Vec::new();
    for id in store.ids() {
        let t = store.get(id);
        tensor_io::encode_into(t, &mut payload);
        params.push(ParamEntry {
            name: store.name(id).to_string(),
            shape: t.shape().to_vec(),
            trainable: store.is_trainable(id),
        });
    }
    let manifest = CheckpointManifest {
        schema: SCHEMA.into(),
        architecture: arch,
        tensors: bmt.file_name().expect("stem has a file name").to_string_lossy().into_owned(),
        params,
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("checkpoint manifest serializes");
    text.push('\n');
    write(&bmt, payload)?;
    write(&json, text)
}

pub fn save_model(stem: &Path, model: &Model) -> Result<()> {
    save(stem, model.architecture(), model.store())
}

/// Rebuilds the architecture and loads every parameter by name.
pub fn load(stem: &Path) -> Result<Model> {
    let (json, _) = paths(stem);
    let manifest: CheckpointManifest =
        serde_json::from_slice(&read(&json)?).map_err(|e| Error::format(&json, e.to_string()))?;
    if manifest.schema != SCHEMA {
        return Err(Error::format(&json, format!("field `schema`: expected {SCHEMA:?}, got {:?}", manifest.schema)));
    }
    let bmt = json.parent().unwrap_or(Path::new("")).join(&manifest.tensors);
    let tensors = tensor_io::decode_all(&read(&bmt)?).map_err(|m| Error::format(&bmt, m))?;
    if tensors.len() != manifest.params.len() {
        return Err(Error::format(
            &bmt,
            format!("{} tensors for {} named parameters", tensors.len(), manifest.params.len()),
        ));
    }
    let mut model = match &manifest.architecture {
        Architecture::Stage(cfg) => Model::Stage(build_stage_model(cfg, 0)?),
        Architecture::Health(cfg) => Model::Health(build_health_model(cfg, 0)?),
    };
    if model.store().len() != tensors.len() {
        return Err(Error::format(
            &json,
            format!("architecture has {} parameters, checkpoint {}", model.store().len(), tensors.len()),
        ));
    }
    for (entry, t) in manifest.params.iter().zip(tensors) {
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::format(&bmt, format!("{}: payload shape {:?}, manifest {:?}", entry.name, t.shape(), entry.shape)));
        }
        model.store_mut().set(&entry.name, t)?;
    }
    Ok(model)
}
