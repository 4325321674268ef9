use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, ParamStore};
use crate::autograd::Mat;
use crate::error::{Result, SwepError};

pub const CHECKPOINT_FORMAT: &str = "swep-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorRecord {
    shape: [usize; 2],
    data: Vec<f64>,
}

/// JSON container of every named parameter plus the configuration needed to
/// rebuild the model. Floats are written with shortest round-trip formatting,
/// so a save/load cycle is bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub encoder: EncoderConfig,
    pub vocab_size: usize,
    pub vocab_hash: String,
    pub step: usize,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
    params: BTreeMap<String, TensorRecord>,
}

impl Checkpoint {
    pub fn new(
        encoder: EncoderConfig,
        vocab_size: usize,
        vocab_hash: String,
        step: usize,
        params: &ParamStore,
    ) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            encoder,
            vocab_size,
            vocab_hash,
            step,
            meta: BTreeMap::new(),
            params: params
                .iter()
                .map(|(n, m)| {
                    let (r, c) = m.dim();
                    (
                        n.clone(),
                        TensorRecord {
                            shape: [r, c],
                            data: m.iter().copied().collect(),
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn params(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for (name, rec) in &self.params {
            let m = Mat::from_shape_vec((rec.shape[0], rec.shape[1]), rec.data.clone())
                .map_err(|e| SwepError::Checkpoint(format!("tensor {name}: {e}")))?;
            store.insert(name.clone(), m);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| SwepError::Checkpoint(e.to_string()))?;
        fs::write(path, text).map_err(|e| SwepError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SwepError::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| SwepError::Parse {
            path: path.into(),
            message: e.to_string(),
        })?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(SwepError::Checkpoint(format!("unexpected format {:?}", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(SwepError::Checkpoint(format!("unsupported version {}", ck.version)));
        }
        Ok(ck)
    }

    /// Fails unless the checkpoint was trained with the vocabulary hashing to `hash`.
    pub fn check_vocab(&self, hash: &str) -> Result<()> {
        if self.vocab_hash != hash {
            return Err(SwepError::Checkpoint(format!(
                "vocabulary hash mismatch: checkpoint {} vs {}",
                self.vocab_hash, hash
            )));
        }
        Ok(())
    }
}
