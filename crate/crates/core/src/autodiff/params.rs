use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Named learnable tensors with gradient accumulators, in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: IndexMap<String, ParamEntry<T>>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        let grad = value.zeros_like();
        self.entries.insert(name, ParamEntry { value, grad });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.get(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::UnknownParam(name.to_owned()))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|e| &e.grad)
            .ok_or_else(|| Error::UnknownParam(name.to_owned()))
    }

    /// Replaces a value, keeping the shape.
    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_owned()))?;
        if entry.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_value",
                lhs: entry.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        entry.value = value;
        Ok(())
    }

    pub(crate) fn value_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::UnknownParam(name.to_owned()))
    }

    pub fn accumulate(&mut self, name: &str, grad: &Tensor<T>) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_owned()))?;
        if entry.grad.shape() != grad.shape() {
            return Err(Error::ShapeMismatch {
                op: "accumulate",
                lhs: entry.grad.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        entry
            .grad
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .for_each(|(a, &b)| *a = *a + b);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for entry in self.entries.values_mut() {
            entry.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
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

    /// Total number of scalars across all values.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry {
                            value: e.value.cast(),
                            grad: e.grad.cast(),
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Plain SGD: `value -= lr * grad` for every entry, then zeroes the gradients.
pub fn sgd_step<T: Element>(store: &mut ParamStore<T>, lr: f64) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    let lr = T::lit(lr);
    for entry in store.entries.values_mut() {
        for (v, g) in entry.value.data_mut().iter_mut().zip(entry.grad.data_mut()) {
            *v = *v - lr * *g;
            *g = T::zero();
        }
    }
    Ok(())
}
