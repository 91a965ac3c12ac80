//! JSON model checkpoints: configuration, vocabulary and every named
//! parameter, with exact float round-tripping.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::Mat;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub trainable: bool,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    /// Digest of the run configuration that produced the model.
    pub config_sha256: Option<String>,
    pub model: ModelConfig,
    pub vocab_sha256: String,
    pub vocab: Vec<String>,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, config_sha256: Option<&str>) -> Self {
        let params = model
            .params
            .ids()
            .map(|id| {
                let value = model.params.value(id);
                ParamRecord {
                    name: model.params.name(id).to_string(),
                    rows: value.nrows(),
                    cols: value.ncols(),
                    trainable: model.params.is_trainable(id),
                    data: value.iter().copied().collect(),
                }
            })
            .collect();
        Checkpoint {
            format_version: FORMAT_VERSION,
            config_sha256: config_sha256.map(str::to_string),
            model: model.config.clone(),
            vocab_sha256: model.vocab.digest(),
            vocab: model.vocab.tokens().to_vec(),
            params,
        }
    }

    /// Rebuilds the model; every parameter must be present with its
    /// registered shape.
    pub fn into_model(self) -> Result<Model> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                self.format_version
            )));
        }
        let vocab = Vocabulary::from_tokens(self.vocab)?;
        if vocab.digest() != self.vocab_sha256 {
            return Err(Error::Checkpoint("vocabulary digest mismatch".into()));
        }
        let mut model = Model::new(self.model, vocab, None, 0)?;
        if self.params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for rec in self.params {
            let id = model
                .params
                .id(&rec.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {:?}", rec.name)))?;
            let value = Mat::from_shape_vec((rec.rows, rec.cols), rec.data)
                .map_err(|e| Error::Checkpoint(format!("parameter {:?}: {e}", rec.name)))?;
            if value.dim() != model.params.value(id).dim() {
                return Err(Error::Checkpoint(format!(
                    "parameter {:?} is {:?}, model expects {:?}",
                    rec.name,
                    value.dim(),
                    model.params.value(id).dim()
                )));
            }
            *model.params.value_mut(id) = value;
            model.params.set_trainable(id, rec.trainable);
        }
        Ok(model)
    }
}

pub fn save_model(model: &Model, path: impl AsRef<Path>, config_sha256: Option<&str>) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string(&Checkpoint::from_model(model, config_sha256))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Loads a model and the configuration digest it was saved with.
pub fn load_model(path: impl AsRef<Path>) -> Result<(Model, Option<String>)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_str(&text)?;
    let digest = ckpt.config_sha256.clone();
    Ok((ckpt.into_model()?, digest))
}
