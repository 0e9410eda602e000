//! JSON checkpoint container.
//!
//! ```json
//! {"format":"clickseg-checkpoint","version":1,"config":{...},
//!  "params":[{"name":"pos_embed","shape":[256,16],"data":[...]}, ...]}
//! ```
//!
//! Parameters appear in model construction order; values are written as
//! shortest round-trip decimals, so saving is byte-for-byte deterministic
//! and loading is exact for `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FORMAT: &str = "clickseg-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn from_model<S: Scalar>(model: &Model<S>) -> Self {
        let params = model
            .params()
            .iter()
            .map(|(name, t)| ParamRecord {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|v| v.to_f64_lossy()).collect(),
            })
            .collect();
        Checkpoint {
            format: FORMAT.to_string(),
            version: VERSION,
            config: model.config().clone(),
            params,
        }
    }

    /// Rebuilds the model, requiring an exact name/shape match for every
    /// parameter.
    pub fn to_model<S: Scalar>(&self) -> Result<Model<S>> {
        if self.format != FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", self.format)));
        }
        if self.version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", self.version)));
        }
        let mut model = Model::new(self.config.clone(), 0)?;
        let store = model.params_mut();
        if store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                store.len()
            )));
        }
        let names = store.names().to_vec();
        for (slot, name) in store.tensors_mut().iter_mut().zip(&names) {
            let rec = self
                .params
                .iter()
                .find(|r| &r.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if rec.shape != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: shape {:?}, expected {:?}",
                    rec.shape,
                    slot.shape()
                )));
            }
            *slot = Tensor::new(rec.shape.clone(), rec.data.iter().map(|&v| S::lit(v)).collect())
                .map_err(|e| Error::Checkpoint(format!("parameter {name}: {e}")))?;
        }
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub fn save_model<S: Scalar>(model: &Model<S>, path: &Path) -> Result<()> {
    fs::write(path, Checkpoint::from_model(model).to_json()?)?;
    Ok(())
}

pub fn load_model<S: Scalar>(path: &Path) -> Result<Model<S>> {
    Checkpoint::from_json(&fs::read_to_string(path)?)?.to_model()
}
