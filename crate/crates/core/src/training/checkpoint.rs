use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::error::{CoolError, Result};
use crate::model::CoolModel;

pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    /// Hash of the serialized experiment configuration.
    pub config_hash: String,
    pub seed: u64,
    pub variant: String,
    pub frozen_hash: String,
    pub params_hash: String,
}

/// Writes the model parameters and a manifest into `dir`.
pub fn save_checkpoint(dir: &Path, model: &CoolModel, config_hash: &str, seed: u64) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join(PARAMS_FILE))?);
    model.store().write_to(&mut w)?;
    drop(w);
    let manifest = CheckpointManifest {
        config_hash: config_hash.to_string(),
        seed,
        variant: model.variant().tag().to_string(),
        frozen_hash: model.frozen().fingerprint(),
        params_hash: model.store().fingerprint(),
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

/// Loads parameters saved by [`save_checkpoint`] into `model`, refusing a
/// checkpoint trained against a different frozen encoder.
pub fn load_checkpoint(dir: &Path, model: &mut CoolModel) -> Result<CheckpointManifest> {
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if manifest.frozen_hash != model.frozen().fingerprint() {
        return Err(CoolError::Config(format!(
            "checkpoint {} was trained with a different frozen encoder",
            dir.display()
        )));
    }
    let archive = ParamStore::read_from(&mut BufReader::new(File::open(dir.join(PARAMS_FILE))?))?;
    model.load_params(&archive)?;
    if model.store().fingerprint() != manifest.params_hash {
        return Err(CoolError::Format("parameter archive does not match its manifest".into()));
    }
    Ok(manifest)
}
