use indexmap::IndexMap;

use crate::error::{dim_err, param_err, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub tensor: Tensor<T>,
    pub requires_grad: bool,
}

/// Named tensors in insertion order. Learnable weights have `requires_grad`;
/// running normalization statistics are stored alongside without it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T = f32> {
    entries: IndexMap<String, ParamEntry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor<T>,
        requires_grad: bool,
    ) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(param_err!("duplicate parameter name {name}"));
        }
        self.entries.insert(
            name,
            ParamEntry {
                tensor,
                requires_grad,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| param_err!("unknown parameter {name}"))
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| param_err!("unknown parameter {name}"))
    }

    /// Replaces a tensor's values, keeping its flag; shapes must agree.
    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != tensor.shape() {
            return Err(dim_err!(
                "parameter {name} has shape {:?}, got {:?}",
                slot.shape(),
                tensor.shape()
            ));
        }
        *slot = tensor;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of learnable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.requires_grad)
            .map(|e| e.tensor.len())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry {
                            tensor: e.tensor.cast(),
                            requires_grad: e.requires_grad,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Gradient per learnable parameter for one backward pass.
#[derive(Clone, Debug, Default)]
pub struct GradRecord<T = f32> {
    grads: IndexMap<String, Tensor<T>>,
}

impl<T: Real> GradRecord<T> {
    pub(crate) fn from_map(grads: IndexMap<String, Tensor<T>>) -> Self {
        Self { grads }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_ordered() {
        let mut s = ParamStore::<f32>::new();
        s.insert("b", Tensor::zeros(&[2]), true).unwrap();
        s.insert("a", Tensor::zeros(&[3]), false).unwrap();
        assert!(s.insert("a", Tensor::zeros(&[1]), true).is_err());
        assert_eq!(s.names().collect::<Vec<_>>(), vec!["b", "a"]);
        assert_eq!(s.num_trainable(), 2);
        assert!(s.set("a", Tensor::zeros(&[4])).is_err());
    }
}
