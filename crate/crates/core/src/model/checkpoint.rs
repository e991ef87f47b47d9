//! Binary checkpoint format: a tensor archive with magic `SBCK` whose header
//! carries the network config, epoch, best score bits and RNG state. Values
//! are stored as raw bits, so a round trip is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::archive;
use super::params::ParamStore;
use super::{Model, UNetConfig};
use crate::error::Result;
use crate::rng::RngState;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"SBCK";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: UNetConfig,
    pub params: ParamStore,
    pub rng: RngState,
    pub epoch: usize,
    pub best_val: f64,
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: UNetConfig,
    epoch: usize,
    best_val_bits: u64,
    rng: RngState,
    meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(model: &Model, rng: RngState, epoch: usize, best_val: f64) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config: model.config().clone(),
            params: model.params.clone(),
            rng,
            epoch,
            best_val,
            meta: serde_json::Value::Null,
        }
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_parts(self.config.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            epoch: self.epoch,
            best_val_bits: self.best_val.to_bits(),
            rng: self.rng.clone(),
            meta: self.meta.clone(),
        };
        archive::encode(MAGIC, self.version, serde_json::to_value(header)?, &self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, params) = archive::decode(MAGIC, CHECKPOINT_VERSION, bytes)?;
        let header: Header = serde_json::from_value(meta)?;
        Ok(Self {
            version: CHECKPOINT_VERSION,
            config: header.config,
            params,
            rng: header.rng,
            epoch: header.epoch,
            best_val: f64::from_bits(header.best_val_bits),
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
