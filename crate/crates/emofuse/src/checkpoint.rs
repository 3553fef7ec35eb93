//! Trained model on disk: the parameter dump plus the full run
//! configuration, so evaluation rebuilds the exact training-time shapes.

use std::path::Path;

use emofuse_core::diff::ParamStore;
use emofuse_core::model::Model;
use emofuse_core::train::RunConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{load_params, read_json, save_params, write_json, ParamManifest};

pub const MANIFEST: &str = "checkpoint.json";
pub const PARAMS: &str = "params.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    /// Dimensions, label scheme, seeds, optimizer settings and the fitted
    /// EEG scale used in training.
    pub config: RunConfig,
    pub params: ParamManifest,
}

pub struct Checkpoint {
    pub config: RunConfig,
    pub model: Model,
    pub store: ParamStore,
}

pub fn save_checkpoint(dir: &Path, config: &RunConfig, store: &ParamStore) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let params = save_params(store, dir, PARAMS)?;
    write_json(
        &dir.join(MANIFEST),
        &CheckpointManifest {
            format_version: FORMAT_VERSION,
            config: *config,
            params,
        },
    )
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(MANIFEST);
    let m: CheckpointManifest = read_json(&path)?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::format(&path, format!("unsupported checkpoint version {}", m.format_version)));
    }
    m.config.validate()?;
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, m.config.model, m.config.seeds.init)?;
    load_params(&mut store, &m.params, dir)?;
    Ok(Checkpoint {
        config: m.config,
        model,
        store,
    })
}
