use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::ModelConfig;

/// Named parameter tensors of one model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightStore<T: Scalar = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> WeightStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Option<Tensor<T>> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::Weights(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> WeightStore<U> {
        WeightStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Checks the store holds exactly the parameters `config` implies, each
    /// with its expected shape.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        config.validate()?;
        let specs = config.parameter_specs();
        for (name, shape) in &specs {
            let t = self.require(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Weights(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        if self.tensors.len() != specs.len() {
            let extra: Vec<_> = self
                .tensors
                .keys()
                .filter(|k| !specs.iter().any(|(n, _)| n == *k))
                .collect();
            return Err(Error::Weights(format!("unexpected parameters {extra:?}")));
        }
        Ok(())
    }
}
