use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tape::Matrix;
use super::AutodiffError;

pub const CHECKPOINT_FORMAT: &str = "mhan-ckpt-v1";

/// On-disk parameter snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub seed: u64,
    pub params: BTreeMap<String, Vec<Vec<f64>>>,
    pub config: serde_json::Value,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, config: serde_json::Value) -> Self {
        let params = store
            .snapshot()
            .into_iter()
            .map(|(name, m)| (name, m.outer_iter().map(|r| r.to_vec()).collect()))
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            seed: store.seed(),
            params,
            config,
        }
    }

    pub fn matrices(&self) -> Result<BTreeMap<String, Matrix>, AutodiffError> {
        self.params
            .iter()
            .map(|(name, rows)| {
                let cols = rows.first().map_or(0, Vec::len);
                if rows.iter().any(|r| r.len() != cols) {
                    return Err(AutodiffError::Checkpoint(format!("ragged rows in {name}")));
                }
                let flat: Vec<f64> = rows.iter().flatten().copied().collect();
                let m = Matrix::from_shape_vec((rows.len(), cols), flat)
                    .map_err(|e| AutodiffError::Checkpoint(e.to_string()))?;
                Ok((name.clone(), m))
            })
            .collect()
    }

    /// Copy the snapshot into `store`, which must have the same layout.
    pub fn restore(&self, store: &mut ParamStore) -> Result<(), AutodiffError> {
        store.load_values(&self.matrices()?)
    }

    pub fn to_json(&self) -> Result<String, AutodiffError> {
        serde_json::to_string(self).map_err(|e| AutodiffError::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, AutodiffError> {
        let ckpt: Self =
            serde_json::from_str(text).map_err(|e| AutodiffError::Checkpoint(e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(AutodiffError::Checkpoint(format!(
                "unsupported format {:?}",
                ckpt.format
            )));
        }
        Ok(ckpt)
    }

    pub fn write(&self, path: &Path) -> Result<(), AutodiffError> {
        std::fs::write(path, self.to_json()?)
            .map_err(|e| AutodiffError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn read(path: &Path) -> Result<Self, AutodiffError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AutodiffError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}
