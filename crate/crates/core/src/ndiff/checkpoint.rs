//! Versioned JSON checkpoint of named arrays.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::graph::{Matrix, ParamStore};
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl NamedArray {
    pub fn from_matrix(name: &str, m: &Matrix) -> Self {
        Self {
            name: name.to_string(),
            shape: vec![m.nrows(), m.ncols()],
            values: m.iter().copied().collect(),
        }
    }

    pub fn from_slice(name: &str, v: &[f64]) -> Self {
        Self {
            name: name.to_string(),
            shape: vec![v.len()],
            values: v.to_vec(),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        let [r, c] = self.shape[..] else {
            return Err(Error::shape(format!("{}: expected a 2-d array", self.name)));
        };
        Matrix::from_shape_vec((r, c), self.values.clone())
            .map_err(|e| Error::shape(format!("{}: {e}", self.name)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    /// Free-form architecture description owned by the caller.
    pub meta: serde_json::Value,
    pub params: Vec<NamedArray>,
    /// Non-trainable state such as batch-norm running statistics.
    pub buffers: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, meta: serde_json::Value, buffers: Vec<NamedArray>) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            meta,
            params: store
                .iter()
                .map(|p| NamedArray::from_matrix(&p.name, &p.value))
                .collect(),
            buffers,
        }
    }

    /// Copies parameter values into `store`, matching by name and shape.
    pub fn restore_params(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::shape(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for arr in &self.params {
            let id = store
                .find(&arr.name)
                .ok_or_else(|| Error::schema(&arr.name, "unknown parameter"))?;
            let m = arr.to_matrix()?;
            if m.dim() != store.value(id).dim() {
                return Err(Error::shape(format!("{}: shape {:?}", arr.name, arr.shape)));
            }
            store.get_mut(id).value = m;
        }
        Ok(())
    }

    pub fn buffer(&self, name: &str) -> Result<&NamedArray> {
        self.buffers
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::schema(name, "missing buffer"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(self).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        write_atomic(path, &json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::schema(
                "format_version",
                format!("unsupported version {}", ck.format_version),
            ));
        }
        Ok(ck)
    }
}
