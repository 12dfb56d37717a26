use super::{ModelConfig, PrototypeModel};
use crate::autodiff::Tensor;
use crate::container;
use crate::error::{Error, Result};
use serde_json::json;
use std::collections::BTreeMap;
use std::path::Path;

pub const MODEL_MAGIC: &[u8; 5] = b"PTTA1";

impl PrototypeModel {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = json!({
            "config": serde_json::to_value(&self.config)?,
            "class_of": self.class_of,
        });
        container::encode(MODEL_MAGIC, header, &self.named_tensors())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, tensors) = container::decode(MODEL_MAGIC, bytes)?;
        let config: ModelConfig = serde_json::from_value(header["config"].clone())
            .map_err(|e| Error::Corrupt(format!("model config: {e}")))?;
        let class_of: Vec<usize> = serde_json::from_value(header["class_of"].clone())
            .map_err(|e| Error::Corrupt(format!("class assignment: {e}")))?;
        let mut by_name: BTreeMap<String, Tensor> = tensors.into_iter().collect();
        // Start from a structurally identical model, then overwrite every tensor.
        let mut model = PrototypeModel::init(config, 0)?;
        for (name, slot) in model.named_tensors_mut() {
            let t = by_name
                .remove(&name)
                .ok_or_else(|| Error::Corrupt(format!("missing tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Corrupt(format!(
                    "tensor {name} has shape {:?}, config implies {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Corrupt(format!("unexpected tensor {extra}")));
        }
        model.class_of = class_of;
        model.validate().map_err(|e| Error::Corrupt(e.to_string()))?;
        Ok(model)
    }
}

pub fn save_model(model: &PrototypeModel, path: &Path) -> Result<()> {
    std::fs::write(path, model.to_bytes()?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<PrototypeModel> {
    PrototypeModel::from_bytes(&std::fs::read(path)?)
}
