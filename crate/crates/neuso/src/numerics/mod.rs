//! Dense linear algebra, reverse-mode automatic differentiation, and the
//! AdamW update rule.
//!
//! Everything is 64-bit: the models here are tiny, so precision beats
//! speed and finite-difference checks can be tight. Any public operation
//! that produces a NaN or infinity reports an error instead.

mod optim;
mod tape;
mod tensor;

pub use optim::{adamw_step, scheduled_lr, OptimizerState};
pub use tape::{backward, GradientMap, NodeId, Tape};
pub use tensor::Tensor;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Error, Debug)]
pub enum NumericsError {
    #[error("{op}: shape mismatch ({lhs:?} vs {rhs:?})")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: input outside domain")]
    Domain { op: &'static str },
    #[error("backward requires a scalar loss node")]
    NonScalarLoss,
    #[error("checkpoint schema version {found} unsupported (expected {expected})")]
    SchemaVersion { expected: u32, found: u32 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Identifies one learnable tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Flat, named registry of all learnable tensors of a model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// Registers a matrix initialized uniformly on
    /// ±sqrt(6 / (fan_in + fan_out)).
    pub fn register_xavier<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        self.register(name, Tensor::from_vec(vec![rows, cols], data).unwrap())
    }

    /// Registers a vector initialized like a (len × 1) projection.
    pub fn register_xavier_vec<R: Rng>(
        &mut self,
        name: impl Into<String>,
        len: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = (6.0 / (len + 1) as f64).sqrt();
        let data: Vec<f64> = (0..len).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.register(name, Tensor::from_vec(vec![len], data).unwrap())
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }
}

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

/// On-disk snapshot of a parameter store plus the run's seed and
/// hyperparameters. Field order is fixed for byte-stable output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub seed: u64,
    pub hyperparameters: serde_json::Value,
    params: BTreeMap<String, CheckpointTensor>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, seed: u64, hyperparameters: serde_json::Value) -> Self {
        let params = store
            .ids()
            .map(|id| {
                let t = store.get(id);
                (
                    store.name(id).to_string(),
                    CheckpointTensor {
                        shape: t.shape().to_vec(),
                        values: t.data().to_vec(),
                    },
                )
            })
            .collect();
        Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            seed,
            hyperparameters,
            params,
        }
    }

    /// Writes the checkpointed values back into a store laid out by the
    /// same model constructor.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(NumericsError::SchemaVersion {
                expected: CHECKPOINT_SCHEMA_VERSION,
                found: self.schema_version,
            });
        }
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let entry = self
                .params
                .get(&name)
                .ok_or_else(|| NumericsError::Checkpoint(format!("missing parameter {name}")))?;
            let tensor = Tensor::from_vec(entry.shape.clone(), entry.values.clone())
                .map_err(|_| NumericsError::Checkpoint(format!("bad tensor for {name}")))?;
            if tensor.shape() != store.get(id).shape() {
                return Err(NumericsError::Checkpoint(format!(
                    "shape mismatch for {name}: {:?} vs {:?}",
                    tensor.shape(),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = tensor;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| NumericsError::Checkpoint(e.to_string()))
    }
}
