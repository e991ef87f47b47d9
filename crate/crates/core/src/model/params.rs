use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// State such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub kind: ParamKind,
}

/// Named tensors in insertion order. Names are unique.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(name, Param { value, kind });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries.get(name).map(|p| &p.value).ok_or_else(|| Error::ArtifactMismatch(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries.get_mut(name).map(|p| &mut p.value).ok_or_else(|| Error::ArtifactMismatch(format!("missing parameter {name}")))
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.entries.get(name).map(|p| p.kind)
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.entries.shift_remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Trainable entries whose name satisfies `keep`.
    pub fn trainable<'a>(&'a self, keep: impl Fn(&str) -> bool + 'a) -> impl Iterator<Item = (&'a str, &'a Tensor)> + 'a {
        self.iter().filter(move |(n, p)| p.kind == ParamKind::Trainable && keep(n)).map(|(n, p)| (n, &p.value))
    }

    /// Number of scalar trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.trainable(|_| true).map(|(_, t)| t.len()).sum()
    }

    /// Registers every trainable entry on `tape`, as a leaf when `grad` is set
    /// and as a constant otherwise.
    pub fn bind<'t>(&self, tape: &'t Tape, grad: bool) -> Bound<'t> {
        let vars = self
            .trainable(|_| true)
            .map(|(n, t)| {
                let v = if grad { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
                (n.to_string(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Concatenation of the selected trainable entries, in store order.
    pub fn flatten(&self, keep: impl Fn(&str) -> bool) -> Vec<f64> {
        let mut out = Vec::new();
        for (_, t) in self.trainable(keep) {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten) with the same selection.
    pub fn unflatten(&mut self, keep: impl Fn(&str) -> bool, flat: &[f64]) -> Result<()> {
        let total: usize = self.trainable(&keep).map(|(_, t)| t.len()).sum();
        if total != flat.len() {
            return Err(Error::ArtifactMismatch(format!("weight vector has {} entries, parameters need {total}", flat.len())));
        }
        let mut pos = 0;
        for (name, p) in self.entries.iter_mut() {
            if p.kind == ParamKind::Trainable && keep(name) {
                let n = p.value.len();
                p.value.data_mut().copy_from_slice(&flat[pos..pos + n]);
                pos += n;
            }
        }
        Ok(())
    }
}

/// Tape handles for the trainable entries of a [`ParamStore`].
pub struct Bound<'t> {
    vars: IndexMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars.get(name).copied().ok_or_else(|| Error::ArtifactMismatch(format!("parameter {name} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Binds `name` to `var`, replacing any previous handle.
    pub fn insert(&mut self, name: impl Into<String>, var: Var<'t>) {
        self.vars.insert(name.into(), var);
    }

    /// Gradients of the last backward pass; entries that did not influence
    /// the loss are omitted.
    pub fn grads(&self) -> IndexMap<String, Tensor> {
        self.vars.iter().filter_map(|(n, v)| v.grad().map(|g| (n.clone(), g))).collect()
    }
}
