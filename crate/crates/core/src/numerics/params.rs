use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::io::write_atomic;

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

/// Gradients keyed by parameter name; shapes mirror the parameters.
pub type GradientMap = ParamSet;

#[derive(Serialize, Deserialize)]
struct SnapshotEntry {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Copies every tensor of `other` in, keeping existing names not present there.
    pub fn extend(&mut self, other: ParamSet) {
        self.tensors.extend(other.tensors);
    }

    /// Subset whose names start with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Largest absolute entry-wise difference over shared names.
    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        self.tensors
            .iter()
            .filter_map(|(k, v)| other.tensors.get(k).map(|o| v.max_abs_diff(o)))
            .fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> Result<String> {
        let doc: BTreeMap<&str, SnapshotEntry> = self
            .tensors
            .iter()
            .map(|(k, t)| {
                (
                    k.as_str(),
                    SnapshotEntry {
                        shape: t.shape().to_vec(),
                        data: t.data().to_vec(),
                    },
                )
            })
            .collect();
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: BTreeMap<String, SnapshotEntry> = serde_json::from_str(text)?;
        let mut out = ParamSet::new();
        for (name, entry) in doc {
            out.insert(name, Tensor::new(entry.shape, entry.data)?);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ParamSet::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_layout_is_name_to_shape_and_data() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let v: serde_json::Value = serde_json::from_str(&p.to_json().unwrap()).unwrap();
        assert_eq!(v["w"]["shape"], serde_json::json!([1, 2]));
        assert_eq!(v["w"]["data"], serde_json::json!([1.0, 2.0]));
        assert_eq!(ParamSet::from_json(&p.to_json().unwrap()).unwrap(), p);
    }

    #[test]
    fn snapshot_with_bad_length_is_rejected() {
        let text = r#"{"w": {"shape": [2, 2], "data": [1.0]}}"#;
        assert!(ParamSet::from_json(text).is_err());
    }
}
