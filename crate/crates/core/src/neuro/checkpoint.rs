use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ParamStore, Partition};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "altq-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub partition: Partition,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Everything needed to restore a model or resume a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub vocabulary: Vec<String>,
    pub params: Vec<ParamRecord>,
    /// Optimizer momentum buffers, one per parameter in `params` order.
    #[serde(default)]
    pub optimizer: Option<Vec<Vec<f64>>>,
    /// Resolved run configuration echo.
    pub config: serde_json::Value,
    #[serde(default)]
    pub epoch: usize,
    #[serde(default)]
    pub phase: String,
}

impl Checkpoint {
    pub fn capture(store: &ParamStore, vocabulary: &[String], config: serde_json::Value) -> Self {
        let params = store
            .iter()
            .map(|(_, p)| ParamRecord {
                name: p.name.clone(),
                partition: p.partition,
                shape: p.value.shape().to_vec(),
                values: p.value.data().to_vec(),
            })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            vocabulary: vocabulary.to_vec(),
            params,
            optimizer: None,
            config,
            epoch: 0,
            phase: String::new(),
        }
    }

    pub fn to_store(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for r in &self.params {
            let t = Tensor::new(r.shape.clone(), r.values.clone())?;
            store.insert(&r.name, r.partition, t)?;
        }
        Ok(store)
    }

    /// Copies stored values into an existing store, matching by name and shape.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} tensors, model expects {}",
                self.params.len(),
                store.len()
            )));
        }
        for r in &self.params {
            let id = store.id(&r.name)?;
            let p = store.get_mut(id);
            if p.value.shape() != r.shape.as_slice() || p.partition != r.partition {
                return Err(Error::Data(format!(
                    "tensor `{}` has shape {:?}/{}, checkpoint has {:?}/{}",
                    r.name,
                    p.value.shape(),
                    p.partition,
                    r.shape,
                    r.partition
                )));
            }
            p.value = Tensor::new(r.shape.clone(), r.values.clone())?;
        }
        Ok(())
    }

    pub fn partition_values(&self, partition: Partition) -> Vec<f64> {
        self.params
            .iter()
            .filter(|p| p.partition == partition)
            .flat_map(|p| p.values.iter().copied())
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = serde_json::to_vec(self)?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_slice(&bytes)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Data(format!(
                "unsupported checkpoint format `{}`",
                ck.format
            )));
        }
        Ok(ck)
    }
}
