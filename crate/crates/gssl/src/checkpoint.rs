//! Checkpoint directories: one `f32` GTSR file per parameter under
//! `params/`, the prototype matrix in `prototypes.gt` and everything else in
//! `meta.json`.

use std::path::Path;

use gssl_core::model::{ModelConfig, ModelState, Params, PrototypeBank};
use serde::{Deserialize, Serialize};

use crate::dataset::{read_json, write_json};
use crate::error::{IoError, Result};
use crate::tensor_io::{read_tensor, write_tensor, Data, Stored};

pub const META: &str = "meta.json";
pub const PROTOTYPES: &str = "prototypes.gt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub model: ModelConfig,
    pub fresh: Vec<bool>,
    pub available: Vec<bool>,
    pub gamma: Option<f64>,
    pub class_gammas: Option<Vec<f64>>,
    pub step: u64,
    /// SHA-256 of the resolved run configuration that produced the state.
    pub config_sha256: String,
    pub parameters: Vec<String>,
}

/// Writes `state` under `dir`. Parameters and prototypes are rounded to
/// `f32`; loading gives back the rounded values.
pub fn save_checkpoint(dir: &Path, state: &ModelState, config_sha256: &str) -> Result<()> {
    let params_dir = dir.join("params");
    std::fs::create_dir_all(&params_dir).map_err(|e| IoError::path(&params_dir, e))?;
    let mut names = Vec::new();
    for (name, t) in state.params.named() {
        write_tensor(&params_dir.join(format!("{name}.gt")), &Stored::f32(t))?;
        names.push(name);
    }
    write_tensor(&dir.join(PROTOTYPES), &Stored::f32(&state.bank.vectors))?;
    let meta = Meta {
        model: state.config.clone(),
        fresh: state.bank.fresh.clone(),
        available: state.bank.available.clone(),
        gamma: state.gamma,
        class_gammas: state.class_gammas.clone(),
        step: state.step,
        config_sha256: config_sha256.to_string(),
        parameters: names,
    };
    write_json(&dir.join(META), &meta)
}

fn read_f32(path: &Path) -> Result<gssl_core::Tensor> {
    let stored = read_tensor(path)?;
    if !matches!(stored.data, Data::F32(_)) {
        return Err(IoError::Invalid(format!("{}: expected f32 data", path.display())));
    }
    stored.to_tensor()
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelState, Meta)> {
    let meta: Meta = read_json(&dir.join(META))?;
    meta.model.validate()?;
    let mut params = Params::init(&meta.model, 0);
    let expected: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    if meta.parameters != expected {
        return Err(IoError::Invalid(format!(
            "{}: parameter list {:?} does not match the model layout",
            dir.display(),
            meta.parameters
        )));
    }
    for name in &expected {
        let t = read_f32(&dir.join("params").join(format!("{name}.gt")))?;
        params.set(name, t)?;
    }
    let vectors = read_f32(&dir.join(PROTOTYPES))?;
    let (f, k) = (meta.model.feature_dim, meta.model.num_classes);
    if vectors.shape() != [f, k] || meta.fresh.len() != k || meta.available.len() != k {
        return Err(IoError::Invalid(format!("{}: prototype bank does not match the model", dir.display())));
    }
    let state = ModelState {
        config: meta.model.clone(),
        params,
        bank: PrototypeBank {
            vectors,
            fresh: meta.fresh.clone(),
            available: meta.available.clone(),
        },
        gamma: meta.gamma,
        class_gammas: meta.class_gammas.clone(),
        step: meta.step,
    };
    Ok((state, meta))
}
