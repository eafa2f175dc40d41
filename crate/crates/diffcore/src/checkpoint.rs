use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::DiffError;
use crate::store::ParamStore;
use crate::Matrix;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// One named array with its Adam moments, flattened row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: [usize; 2],
    pub value: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    #[serde(default)]
    pub frozen: bool,
}

/// Serializable snapshot of a [`ParamStore`].
///
/// Floats are written with round-trip precision so reloading reproduces every
/// value bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config_hash: String,
    pub step: u64,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, config_hash: impl Into<String>) -> Self {
        let params = store
            .params()
            .iter()
            .map(|p| {
                let (r, c) = p.value.dim();
                ParamRecord {
                    name: p.name.clone(),
                    shape: [r, c],
                    value: p.value.iter().copied().collect(),
                    m: p.m.iter().copied().collect(),
                    v: p.v.iter().copied().collect(),
                    frozen: p.frozen,
                }
            })
            .collect();
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config_hash: config_hash.into(),
            step: store.step(),
            params,
        }
    }

    pub fn to_store(&self) -> Result<ParamStore, DiffError> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(DiffError::Checkpoint(format!(
                "unsupported format version {}",
                self.format_version
            )));
        }
        let mut store = ParamStore::new();
        for rec in &self.params {
            let shape = (rec.shape[0], rec.shape[1]);
            let to_matrix = |data: &[f64], what: &str| {
                Matrix::from_shape_vec(shape, data.to_vec()).map_err(|_| {
                    DiffError::Checkpoint(format!(
                        "{} of `{}` has {} entries, shape {:?}",
                        what,
                        rec.name,
                        data.len(),
                        shape
                    ))
                })
            };
            let id = store.add(rec.name.clone(), to_matrix(&rec.value, "value")?)?;
            let p = store.param_mut(id);
            p.m = to_matrix(&rec.m, "m")?;
            p.v = to_matrix(&rec.v, "v")?;
            p.frozen = rec.frozen;
        }
        store.set_step(self.step);
        if !store.all_finite() {
            return Err(DiffError::Checkpoint("non-finite parameter value".into()));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<(), DiffError> {
        let text = serde_json::to_string(self).map_err(|e| DiffError::Checkpoint(e.to_string()))?;
        fs::write(path, text)
            .map_err(|e| DiffError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, DiffError> {
        let text = fs::read_to_string(path)
            .map_err(|e| DiffError::Checkpoint(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| DiffError::Checkpoint(e.to_string()))
    }
}
