//! Dotted-key JSON config overlays. Defaults are serialized to a JSON tree,
//! config-file entries and CLI flags are written in as `a.b.c` paths (flags
//! last, so a flag wins), and the tree is deserialized back into the typed
//! config. Nested objects in the file flatten to the same path space, so a
//! pipeline provenance file works as a config file unchanged.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

pub type Overlay = Vec<(String, Value)>;

pub fn flatten(value: &Value, prefix: &str, out: &mut Overlay) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let path = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(v, &path, out);
            }
        }
        leaf => out.push((prefix.to_string(), leaf.clone())),
    }
}

pub fn read_overlay(path: &Path) -> Result<Overlay> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Read {
        path: path.into(),
        source,
    })?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if !value.is_object() {
        return Err(Error::config(format!(
            "{}: config root must be a JSON object",
            path.display()
        )));
    }
    let mut pairs = Overlay::new();
    flatten(&value, "", &mut pairs);
    Ok(pairs)
}

fn set_path(tree: &mut Value, path: &str, leaf: Value) {
    let parts: Vec<&str> = path.split('.').collect();
    let mut node = tree;
    for part in &parts[..parts.len() - 1] {
        if !node.is_object() {
            *node = Value::Object(Default::default());
        }
        node = node
            .as_object_mut()
            .expect("node was made an object")
            .entry(part.to_string())
            .or_insert(Value::Null);
    }
    if !node.is_object() {
        *node = Value::Object(Default::default());
    }
    node.as_object_mut()
        .expect("node was made an object")
        .insert(parts[parts.len() - 1].to_string(), leaf);
}

/// Apply overlays to `base` in order; later pairs override earlier ones.
pub fn resolve<T: Serialize + DeserializeOwned>(base: &T, overlays: &[&Overlay]) -> Result<T> {
    let mut tree = serde_json::to_value(base).map_err(|e| Error::Internal(e.to_string()))?;
    for pairs in overlays {
        for (path, leaf) in pairs.iter() {
            set_path(&mut tree, path, leaf.clone());
        }
    }
    serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))
}

/// Push `key = value` when the flag was given.
pub fn kv<T: Serialize>(pairs: &mut Overlay, key: &str, value: &Option<T>) {
    if let Some(v) = value {
        pairs.push((
            key.to_string(),
            serde_json::to_value(v).expect("flag value serializes"),
        ));
    }
}

/// Push `key = true` when a presence flag was given.
pub fn kv_flag(pairs: &mut Overlay, key: &str, set: bool) {
    if set {
        pairs.push((key.to_string(), Value::Bool(true)));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Inner {
        a: u32,
        b: f64,
    }

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Outer {
        inner: Inner,
        name: String,
    }

    fn base() -> Outer {
        Outer {
            inner: Inner { a: 1, b: 2.0 },
            name: "x".into(),
        }
    }

    #[test]
    fn dotted_and_nested_keys_agree() {
        let dotted: Overlay = vec![("inner.a".into(), serde_json::json!(9))];
        let mut nested = Overlay::new();
        flatten(&serde_json::json!({"inner": {"a": 9}}), "", &mut nested);
        assert_eq!(
            resolve(&base(), &[&dotted]).unwrap(),
            resolve(&base(), &[&nested]).unwrap()
        );
    }

    #[test]
    fn later_overlay_wins() {
        let file: Overlay = vec![("name".into(), serde_json::json!("file"))];
        let flag: Overlay = vec![("name".into(), serde_json::json!("flag"))];
        let got: Outer = resolve(&base(), &[&file, &flag]).unwrap();
        assert_eq!(got.name, "flag");
    }

    #[test]
    fn type_mismatch_is_config_error() {
        let bad: Overlay = vec![("inner.a".into(), serde_json::json!("nope"))];
        assert!(matches!(
            resolve::<Outer>(&base(), &[&bad]),
            Err(Error::Config(_))
        ));
    }
}
