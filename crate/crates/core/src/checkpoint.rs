//! JSON checkpoints: every model tensor with its shape, the run
//! configuration with its hash, and the data normalization.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::model::Model;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub config: RunConfig,
    pub normalization: Normalization,
    /// Training iterations completed.
    pub iterations: usize,
    pub model: Model,
}

impl Checkpoint {
    pub fn new(config: RunConfig, normalization: Normalization, iterations: usize, model: Model) -> Self {
        Checkpoint { version: CHECKPOINT_VERSION, config_hash: config.hash(), config, normalization, iterations, model }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let ckpt: Checkpoint =
            serde_json::from_reader(file).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!("checkpoint version {} is not supported", ckpt.version)));
        }
        if ckpt.config_hash != ckpt.config.hash() {
            return Err(Error::Schema("checkpoint config hash does not match its config".into()));
        }
        ckpt.model.validate()?;
        Ok(ckpt)
    }
}
