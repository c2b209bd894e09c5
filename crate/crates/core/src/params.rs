use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named learnable tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        let prev = self.tensors.insert(name.clone(), t);
        assert!(prev.is_none(), "duplicate parameter `{name}`");
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Restricts every value to `f32` precision so that checkpoints, which
    /// store 32-bit floats, reproduce the parameters exactly.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors.values_mut() {
            t.round_to_f32();
        }
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        for (name, t) in &self.tensors {
            match other.get(name) {
                Some(o) if o.shape() == t.shape() => {}
                Some(o) => {
                    return Err(Error::CheckpointShape {
                        name: name.clone(),
                        expected: t.shape().to_vec(),
                        found: o.shape().to_vec(),
                    })
                }
                None => {
                    return Err(Error::Checkpoint(format!("missing tensor `{name}`")));
                }
            }
        }
        if let Some(extra) = other.names().find(|n| self.get(n).is_none()) {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        Ok(())
    }
}

/// Small helper that creates weights with the shared initialisation scheme.
pub(crate) struct Init<'a, R: Rng> {
    pub params: &'a mut ParamSet,
    pub rng: &'a mut R,
    pub std: f64,
}

impl<R: Rng> Init<'_, R> {
    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        self.params.insert(
            format!("{name}.w"),
            Tensor::trunc_normal(&[fan_in, fan_out], self.std, self.rng),
        );
        self.params.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
    }

    pub fn norm(&mut self, name: &str, channels: usize) {
        self.params
            .insert(format!("{name}.g"), Tensor::full(&[channels], 1.0));
        self.params
            .insert(format!("{name}.b"), Tensor::zeros(&[channels]));
    }

    pub fn normal(&mut self, name: &str, shape: &[usize]) {
        self.params
            .insert(name.to_string(), Tensor::trunc_normal(shape, self.std, self.rng));
    }
}
