//! Named parameter storage and graph binding.

use std::collections::HashMap;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    /// Whether decoupled weight decay applies to this parameter.
    pub decay: bool,
}

/// Ordered, name-addressable parameter list. Order is insertion order and is
/// what optimizers and checkpoints iterate over.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, decay: bool) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            tensor: tensor.with_requires_grad(true),
            decay,
        });
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.params[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(move |i| &mut self.params[i].tensor)
    }

    /// Overwrites the value of an existing parameter of the same shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let t = self
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        if t.shape() != value.shape() {
            return Err(Error::shape(
                "set_param",
                format!("{name}: {:?} vs {:?}", t.shape(), value.shape()),
            ));
        }
        t.data_mut().copy_from_slice(value.data());
        Ok(())
    }

    /// Registers every parameter as a graph leaf. With `trainable == false`
    /// the leaves are constants and nothing upstream receives gradients.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound<'_> {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    g.leaf(&p.tensor)
                } else {
                    g.constant(Tensor::new(p.tensor.shape().to_vec(), p.tensor.data().to_vec()).unwrap())
                }
            })
            .collect();
        Bound { store: self, vars }
    }
}

/// Parameters of a [`ParamStore`] as leaves in one graph.
#[derive(Debug)]
pub struct Bound<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Var {
        let i = self
            .store
            .position(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"));
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Per-parameter gradients after backward; `None` for parameters no
    /// gradient reached (the optimizer skips those).
    pub fn grads(&self, g: &Graph) -> Vec<Option<Vec<f32>>> {
        self.vars
            .iter()
            .map(|&v| {
                if g.reached(v) {
                    g.grad(v).map(<[f32]>::to_vec)
                } else {
                    None
                }
            })
            .collect()
    }
}
