//! Checkpoints: a JSON tensor container plus a small sidecar manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    schema_version: u32,
    config: ModelConfig,
    params: ParamStore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub schema_version: u32,
    pub config: ModelConfig,
    pub epoch: Option<usize>,
    pub val_cost: Option<f64>,
}

/// Sidecar path: `model.ckpt.json` → `model.ckpt.manifest.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint");
    let stem = name.strip_suffix(".json").unwrap_or(name);
    path.with_file_name(format!("{stem}.manifest.json"))
}

pub fn save_checkpoint(path: &Path, model: &Model, epoch: Option<usize>, val_cost: Option<f64>) -> Result<()> {
    let file = CheckpointFile {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        config: model.config.clone(),
        params: model.store.clone(),
    };
    fs::write(path, serde_json::to_vec(&file)?)?;
    let manifest = CheckpointManifest {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        config: model.config.clone(),
        epoch,
        val_cost,
    };
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path)?;
    let file: CheckpointFile = serde_json::from_slice(&bytes)?;
    if file.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::param(format!(
            "unsupported checkpoint schema_version {}",
            file.schema_version
        )));
    }
    if !file.params.is_finite() {
        return Err(Error::Invariant(format!("checkpoint {} holds non-finite values", path.display())));
    }
    Model::from_store(file.config, file.params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::ProblemKind;

    #[test]
    fn round_trip_is_exact() {
        let model = Model::new(ModelConfig::new(ProblemKind::Vrp), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt.json");
        save_checkpoint(&path, &model, Some(3), Some(1.5)).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.store, model.store);
        assert_eq!(back.config, model.config);
        let side: CheckpointManifest =
            serde_json::from_slice(&fs::read(sidecar_path(&path)).unwrap()).unwrap();
        assert_eq!(side.epoch, Some(3));
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let model = Model::new(ModelConfig::new(ProblemKind::Tsp), 4).unwrap();
        let mut other = ModelConfig::new(ProblemKind::Tsp);
        other.encoder.num_layers = 2;
        assert!(Model::from_store(other, model.store).is_err());
    }
}
