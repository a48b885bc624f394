//! Trained state on disk.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::ModelParams;
use super::TrainOutcome;
use crate::error::{Error, Result};
use crate::io;

const VERSION: u32 = 1;

/// Shared weights, every user's embedding and the stream seed. All noise
/// streams are keyed by `(seed, epoch, ...)`, so the seed and epoch count
/// pin down every generator's position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub seed: u64,
    pub epochs_done: usize,
    pub params: ModelParams,
    pub embeddings: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn from_outcome(out: &TrainOutcome, seed: u64) -> Self {
        Self {
            version: VERSION,
            seed,
            epochs_done: out.losses.len(),
            params: out.params.clone(),
            embeddings: out.embeddings.clone(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let c: Self = io::read_json(path, "train")?;
        if c.version != VERSION {
            return Err(Error::Data(format!(
                "{}: checkpoint version {} is not {VERSION}",
                path.display(),
                c.version
            )));
        }
        Ok(c)
    }
}
