//! JSON config layering: defaults, then a config file, then flag overrides.

use prototta::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use std::path::Path;

/// Recursively overlays `top` onto `base`; objects merge, everything else
/// replaces.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets a dotted key such as `train.epochs`.
pub fn set_path(root: &mut Value, dotted: &str, value: Value) {
    let mut cur = root;
    for part in dotted.split('.') {
        if !cur.is_object() {
            *cur = Value::Object(Default::default());
        }
        cur = cur.as_object_mut().expect("just made an object").entry(part).or_insert(Value::Null);
    }
    *cur = value;
}

pub fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// `T::default()` overlaid with an optional file and `(key, value)`
/// overrides.
pub fn layered<T: Serialize + DeserializeOwned + Default>(file: Option<&Path>, overrides: Vec<(&str, Value)>) -> Result<T> {
    let mut value = serde_json::to_value(T::default())?;
    if let Some(path) = file {
        merge(&mut value, read_json(path)?);
    }
    for (k, v) in overrides {
        set_path(&mut value, k, v);
    }
    serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
}

/// Config file for `train`: model shape plus training options.
#[derive(Debug, Clone, Default, PartialEq, Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSetup {
    pub model: prototta::model::ModelConfig,
    pub train: prototta::harness::TrainOptions,
}

#[cfg(test)]
mod tests {
    use super::*;
    use prototta::harness::SyntheticTaskSpec;
    use serde_json::json;

    #[test]
    fn merge_overlays_nested_objects() {
        let mut base = json!({"a": 1, "b": {"c": 2, "d": 3}});
        merge(&mut base, json!({"b": {"d": 4, "e": 5}, "f": [1]}));
        assert_eq!(base, json!({"a": 1, "b": {"c": 2, "d": 4, "e": 5}, "f": [1]}));
    }

    #[test]
    fn set_path_creates_intermediate_objects() {
        let mut v = json!({"train": {"lr": 0.1}});
        set_path(&mut v, "train.epochs", json!(3));
        set_path(&mut v, "model.backbone.norm_kind", json!("batch_norm"));
        assert_eq!(v["train"], json!({"lr": 0.1, "epochs": 3}));
        assert_eq!(v["model"]["backbone"]["norm_kind"], "batch_norm");
    }

    #[test]
    fn flags_override_file_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spec.json");
        std::fs::write(&path, r#"{"num_classes": 3, "seed": 9}"#).unwrap();
        let spec: SyntheticTaskSpec = layered(Some(&path), vec![("seed", json!(4))]).unwrap();
        assert_eq!((spec.num_classes, spec.seed, spec.input_dim), (3, 4, 32));
    }

    #[test]
    fn partial_train_setup_fills_defaults() {
        let setup: TrainSetup = layered(None, vec![("model.prototypes_per_class", json!(2))]).unwrap();
        assert_eq!(setup.model.prototypes_per_class, 2);
        assert_eq!(setup.model.sub_prototypes, 4);
        assert_eq!(setup.train.epochs, 30);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let err = layered::<SyntheticTaskSpec>(None, vec![("colour", json!(1))]).unwrap_err();
        assert!(err.is_config(), "{err}");
    }
}
