use std::collections::HashMap;

use super::tape::{Gradients, Tape, Var};
use super::value::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub trainable: bool,
}

/// Named, ordered collection of model parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

/// Parameters placed on a tape for one forward/backward pass.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Binding from explicit nodes, one per parameter in store order. Lets a
    /// caller feed parameters computed on the tape (e.g. slices of one flat
    /// leaf for finite-difference checks).
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter `{name}`"
        );
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value,
            grad: None,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
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

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.by_name.get(name).map(|&i| &self.params[i])
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Places every parameter on `tape` as a leaf; only trainable parameters
    /// request gradients.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), p.trainable))
            .collect();
        Bound { vars }
    }

    /// Accumulates the gradients of bound trainable parameters.
    pub fn accumulate_grads(&mut self, bound: &Bound, grads: &mut Gradients) {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            if !p.trainable {
                continue;
            }
            // an unreachable parameter has a zero gradient
            let g = grads
                .take(v)
                .unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec()));
            match &mut p.grad {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += b),
                None => p.grad = Some(g),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }
}
