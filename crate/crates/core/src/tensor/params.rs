use std::collections::{BTreeMap, HashMap};

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A named tensor owned by a model. Non-trainable entries hold buffers such
/// as batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub trainable: bool,
}

/// Ordered collection of parameters addressed by dotted path names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.params[i].value = value;
            self.params[i].grad = None;
            self.params[i].trainable = trainable;
            return;
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            value,
            grad: None,
            trainable,
        });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index
            .get(name)
            .map(|&i| &self.params[i].value)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i].value),
            None => Err(Error::Invalid(format!("unknown parameter {name}"))),
        }
    }

    pub fn param(&self, name: &str) -> Option<&Parameter<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values across trainable parameters.
    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Attaches gradients by name. Shapes must match the parameter values.
    pub fn set_grads(&mut self, grads: BTreeMap<String, Tensor<T>>) -> Result<()> {
        for p in &mut self.params {
            p.grad = None;
        }
        for (name, g) in grads {
            let Some(&i) = self.index.get(&name) else {
                continue;
            };
            let p = &mut self.params[i];
            if g.shape() != p.value.shape() {
                return Err(Error::shape(
                    "set_grads",
                    format!(
                        "{name}: grad {:?} vs value {:?}",
                        g.shape(),
                        p.value.shape()
                    ),
                ));
            }
            p.grad = Some(g);
        }
        Ok(())
    }

    /// Moves all parameters from `other` into `self`, prefixing nothing.
    pub fn extend(&mut self, other: ParamStore<T>) {
        for p in other.params {
            self.insert(p.name, p.value, p.trainable);
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.insert(p.name.clone(), p.value.cast(), p.trainable);
        }
        out
    }
}

/// Batch-norm running statistics for a `[N, C]` input.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], T::one()),
        }
    }

    /// `running <- momentum * running + (1 - momentum) * batch`.
    pub fn update(&mut self, batch_mean: &[T], batch_var: &[T], momentum: T) {
        let keep = momentum;
        let take = T::one() - momentum;
        for (r, &b) in self.mean.data_mut().iter_mut().zip(batch_mean) {
            *r = keep * *r + take * b;
        }
        for (r, &b) in self.var.data_mut().iter_mut().zip(batch_var) {
            *r = keep * *r + take * b;
        }
    }
}
