use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A named trainable tensor with its gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    id: String,
    value: Tensor,
    grad: Tensor,
}

impl Parameter {
    pub fn new(id: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            id: id.into(),
            value,
            grad,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    pub fn set_value(&mut self, value: Tensor) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(Error::shape(format!(
                "parameter {}: value shape {} != {}",
                self.id,
                value.shape(),
                self.value.shape()
            )));
        }
        self.value = value;
        Ok(())
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    pub fn set_grad(&mut self, grad: Tensor) -> Result<()> {
        if grad.shape() != self.value.shape() {
            return Err(Error::shape(format!(
                "parameter {}: grad shape {} != {}",
                self.id,
                grad.shape(),
                self.value.shape()
            )));
        }
        self.grad = grad;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = Tensor::zeros(self.value.shape());
    }
}

/// Gradients keyed by parameter id, as produced by one backward sweep.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    by_id: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub(crate) fn from_map(by_id: BTreeMap<String, Tensor>) -> Self {
        Gradients { by_id }
    }

    pub fn get(&self, id: &str) -> Option<&Tensor> {
        self.by_id.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.by_id.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

/// Anything that owns parameters in a fixed visiting order.
pub trait ParamTree {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter));

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter));

    fn parameters(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p));
        out
    }

    fn parameter_ids(&self) -> Vec<String> {
        self.parameters().iter().map(|p| p.id().to_string()).collect()
    }

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.value().len());
        n
    }

    /// Copies gradients into each parameter's slot; ids absent from `grads`
    /// get zeros.
    fn apply_gradients(&mut self, grads: &Gradients) {
        self.visit_mut(&mut |p| match grads.get(p.id()) {
            Some(g) if g.shape() == p.value().shape() => p.grad = g.clone(),
            _ => p.zero_grad(),
        });
    }

    fn find(&self, id: &str) -> Option<&Parameter> {
        let mut found = None;
        self.visit(&mut |p| {
            if found.is_none() && p.id() == id {
                found = Some(p);
            }
        });
        found
    }

    /// Runs `f` on the parameter with the given id; returns whether it was found.
    fn with_param_mut(&mut self, id: &str, f: &mut dyn FnMut(&mut Parameter)) -> bool {
        let mut hit = false;
        self.visit_mut(&mut |p| {
            if !hit && p.id() == id {
                hit = true;
                f(p);
            }
        });
        hit
    }
}

impl ParamTree for Parameter {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(self);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(self);
    }
}

impl<T: ParamTree> ParamTree for Vec<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        for item in self {
            item.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        for item in self {
            item.visit_mut(f);
        }
    }
}

impl<T: ParamTree> ParamTree for Option<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        if let Some(item) = self {
            item.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        if let Some(item) = self {
            item.visit_mut(f);
        }
    }
}
