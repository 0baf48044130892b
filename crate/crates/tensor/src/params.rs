use std::collections::BTreeMap;
use std::sync::Arc;

use crate::tape::{Gradients, Tape, Var};
use crate::{Tensor, TensorError};

/// Named parameter tensors in insertion order.
///
/// Values are shared with the tapes that bind them, so binding is free and a
/// frozen store can be read from several threads at once.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
    index: Arc<BTreeMap<String, usize>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<(), TensorError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        Arc::make_mut(&mut self.index).insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(Arc::new(value));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| self.values[i].as_ref())
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn value(&self, i: usize) -> &Tensor {
        &self.values[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.values[i])
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<(), TensorError> {
        let i = self
            .position(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        if self.values[i].shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "set",
                lhs: self.values[i].shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.values[i] = Arc::new(value);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| (n.as_str(), v.as_ref()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Records every parameter on `tape`; `trainable = false` binds them as
    /// constants so no gradient is accumulated for them.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        Bound {
            vars: self
                .values
                .iter()
                .map(|v| tape.leaf(v.clone(), trainable))
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// A [`ParamStore`] recorded on one tape.
#[derive(Clone)]
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
    index: Arc<BTreeMap<String, usize>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, name: &str) -> Var<'t> {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("parameter `{name}` is not bound"),
        }
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    /// Per-parameter gradients in store order; `None` for parameters the
    /// loss does not depend on.
    pub fn grads(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|v| grads.get(*v).cloned()).collect()
    }

    /// Whether each parameter lies on a differentiable path into `root`.
    pub fn reachable(&self, tape: &Tape, root: Var<'_>) -> Vec<bool> {
        let mark = tape.reachable(root);
        self.vars.iter().map(|v| mark[v.id()]).collect()
    }
}
