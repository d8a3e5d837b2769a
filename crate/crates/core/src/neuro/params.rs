use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::rng::Rng;
use super::tensor::Tensor;
use crate::error::NeuroError;

/// Which sub-network a parameter tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Encoder,
    Decoder,
    Guesser,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Encoder, Partition::Decoder, Partition::Guesser];
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Partition::Encoder => "encoder",
            Partition::Decoder => "decoder",
            Partition::Guesser => "guesser",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub partition: Partition,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named trainable tensors with gradient accumulators.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: &str,
        partition: Partition,
        value: Tensor,
    ) -> Result<ParamId, NeuroError> {
        if !value.is_finite() {
            return Err(NeuroError::NonFinite(name.to_string()));
        }
        if let Some(&id) = self.by_name.get(name) {
            let p = &mut self.params[id.0];
            p.grad = Tensor::zeros(value.shape());
            p.value = value;
            p.partition = partition;
            return Ok(id);
        }
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            partition,
            grad: Tensor::zeros(value.shape()),
            value,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    /// Uniform(-a, a) initialisation with a = 1/sqrt(fan_in).
    pub fn insert_uniform(
        &mut self,
        name: &str,
        partition: Partition,
        shape: &[usize],
        fan_in: usize,
        rng: &mut Rng,
    ) -> ParamId {
        let a = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = rng.uniform_range(-a, a);
        }
        self.insert(name, partition, t).expect("finite init")
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId, NeuroError> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| NeuroError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Adds a gradient buffer into the accumulators.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (p, g) in self.params.iter_mut().zip(&grads.per_param) {
            if let Some(g) = g {
                for (a, b) in p.grad.data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Concatenated values of every tensor in one partition, in insertion order.
    pub fn partition_values(&self, partition: Partition) -> Vec<f64> {
        self.params
            .iter()
            .filter(|p| p.partition == partition)
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }
}

/// Per-parameter gradient buffers produced by one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub(crate) per_param: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub(crate) fn new(n: usize) -> Self {
        Gradients {
            per_param: vec![None; n],
        }
    }

    pub(crate) fn slot(&mut self, id: ParamId, len: usize) -> &mut [f64] {
        self.per_param[id.0].get_or_insert_with(|| vec![0.0; len])
    }

    /// Gradient for one parameter; `None` if the graph never touched it.
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.per_param.get(id.0).and_then(|g| g.as_deref())
    }
}
