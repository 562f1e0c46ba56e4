//! JSON checkpoints: the model configuration, optional normalization
//! statistics and every parameter tensor as `{name, shape, data}` in name
//! order. Floats are written in shortest round-trip form, so a reload is
//! exact and identical models give identical files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::Tensor;

pub const CHECKPOINT_FORMAT: &str = "hymate-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: ModelConfig,
    pub stats: Option<NormStats>,
    pub tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, stats: Option<&NormStats>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            config: model.config.clone(),
            stats: stats.cloned(),
            tensors: model
                .store
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuilds the model; every stored tensor must match a parameter of
    /// the configured architecture by name and shape, and vice versa.
    pub fn into_model(self) -> Result<(Model, Option<NormStats>)> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Data(format!(
                "unsupported checkpoint format {:?} (expected {CHECKPOINT_FORMAT})",
                self.format
            )));
        }
        let mut model = Model::new(self.config, 0)?;
        let mut by_name: BTreeMap<String, TensorEntry> = BTreeMap::new();
        for t in self.tensors {
            if by_name.contains_key(&t.name) {
                return Err(Error::Data(format!("checkpoint repeats tensor {}", t.name)));
            }
            by_name.insert(t.name.clone(), t);
        }
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let name = model.store.name(id).to_string();
            let entry = by_name
                .remove(&name)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks tensor {name}")))?;
            if entry.shape != model.store.value(id).shape() {
                return Err(Error::Data(format!(
                    "tensor {name} has shape {:?}, model expects {:?}",
                    entry.shape,
                    model.store.value(id).shape()
                )));
            }
            *model.store.value_mut(id) = Tensor::new(entry.shape, entry.data)?;
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Data(format!(
                "checkpoint has unknown tensor {extra}"
            )));
        }
        Ok((model, self.stats))
    }
}

/// Writes one tensor per line so the file stays diffable.
pub fn save_checkpoint(
    model: &Model,
    stats: Option<&NormStats>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let ck = Checkpoint::from_model(model, stats);
    let mut s = String::from("{\n");
    s.push_str(&format!(
        "\"format\": {},\n",
        serde_json::to_string(&ck.format)?
    ));
    s.push_str(&format!(
        "\"config\": {},\n",
        serde_json::to_string(&ck.config)?
    ));
    s.push_str(&format!(
        "\"stats\": {},\n",
        serde_json::to_string(&ck.stats)?
    ));
    s.push_str("\"tensors\": [\n");
    for (i, t) in ck.tensors.iter().enumerate() {
        let sep = if i + 1 < ck.tensors.len() { "," } else { "" };
        s.push_str(&format!("{}{sep}\n", serde_json::to_string(t)?));
    }
    s.push_str("]\n}\n");
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, Option<NormStats>)> {
    let ck: Checkpoint = crate::data::read_json(path.as_ref())?;
    ck.into_model()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let model = Model::new(ModelConfig::new(3, 2), 5).unwrap();
        save_checkpoint(&model, None, &path).unwrap();
        let first = std::fs::read(&path).unwrap();
        let (back, stats) = load_checkpoint(&path).unwrap();
        assert!(stats.is_none());
        assert_eq!(back.config, model.config);
        assert_eq!(back.store.snapshot(), model.store.snapshot());
        save_checkpoint(&back, None, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn mismatched_tensors_are_rejected() {
        let model = Model::new(ModelConfig::new(3, 2), 5).unwrap();
        let mut ck = Checkpoint::from_model(&model, None);
        ck.tensors[0].shape = vec![1];
        assert!(ck.clone().into_model().is_err());
        let mut ck = Checkpoint::from_model(&model, None);
        ck.tensors.pop();
        assert!(ck.into_model().is_err());
        let mut ck = Checkpoint::from_model(&model, None);
        ck.format = "other".into();
        assert!(ck.into_model().is_err());
    }
}
