use std::collections::HashMap;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a parameter inside a [`ParamStore`]. Tied weights share one id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Param<T> {
    name: String,
    value: Tensor<T>,
    decay: bool,
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a parameter. `decay` marks it for decoupled weight decay
    /// (matrices yes, biases and layer-norm vectors no).
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, value, decay });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.params[id.0].decay
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p.name.as_str(), &p.value))
    }

    /// Total number of distinct trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// Gradients keyed by [`ParamId`]; `None` for parameters the loss never reached.
#[derive(Clone, Debug)]
pub struct ParamGrads<T> {
    pub(crate) grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// True when the parameter got no gradient or an all-zero one.
    pub fn is_zero(&self, id: ParamId) -> bool {
        self.get(id).map_or(true, |g| g.iter().all(|x| *x == T::zero()))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
