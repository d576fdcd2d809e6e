use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::datasetio::Container;
use crate::error::{Error, Result};
use crate::numkernel::ParamStore;

const KIND: &str = "checkpoint";

/// Trained parameters with the configuration and history that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub config: TrainConfig,
    pub epoch: usize,
    pub loss_history: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    kind: String,
    config: TrainConfig,
    epoch: usize,
    loss_history: Vec<f64>,
}

impl Checkpoint {
    pub fn bit_eq(&self, other: &Checkpoint) -> bool {
        self.params.bit_eq(&other.params)
            && self.config == other.config
            && self.epoch == other.epoch
            && self.loss_history.len() == other.loss_history.len()
            && self
                .loss_history
                .iter()
                .zip(&other.loss_history)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let meta = Meta {
            kind: KIND.to_owned(),
            config: self.config.clone(),
            epoch: self.epoch,
            loss_history: self.loss_history.clone(),
        };
        Container { meta: serde_json::to_value(meta)?, tensors: self.params.clone() }.encode()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let c = Container::decode(bytes)?;
        let meta: Meta = serde_json::from_value(c.meta)
            .map_err(|e| Error::format(8, format!("checkpoint metadata: {e}")))?;
        if meta.kind != KIND {
            return Err(Error::format(8, format!("container holds a '{}', not a checkpoint", meta.kind)));
        }
        Ok(Checkpoint { params: c.tensors, config: meta.config, epoch: meta.epoch, loss_history: meta.loss_history })
    }
}

pub fn save_checkpoint(cp: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, cp.encode()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes)
}
