use std::collections::HashMap;

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// A named learnable tensor and its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter<F: Real = f64> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
}

/// Owns every parameter of a model, addressed by [`ParamId`].
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F: Real = f64> {
    params: Vec<Parameter<F>>,
    by_name: HashMap<String, usize>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a parameter. Panics on a duplicate name, which is a
    /// programming error in model construction.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name, value, grad });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<F>> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(F::zero());
        }
    }

    /// Zero-filled gradient buffer with one slot per parameter.
    pub fn gradients(&self) -> Gradients<F> {
        Gradients {
            slots: self
                .params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
        }
    }

    /// Adds a buffer into the stored `grad` fields, scaled by `s`.
    pub fn accumulate(&mut self, grads: &Gradients<F>, s: F) {
        for (p, g) in self.params.iter_mut().zip(&grads.slots) {
            p.grad.axpy(s, g);
        }
    }

    /// Replaces a parameter value by name, checking the shape.
    pub fn assign(&mut self, name: &str, value: Tensor<F>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::Dimension {
                op: "assign",
                lhs: p.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.add(p.name.clone(), p.value.cast());
        }
        out
    }
}

/// Per-worker gradient accumulator aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Gradients<F: Real = f64> {
    slots: Vec<Tensor<F>>,
}

impl<F: Real> Gradients<F> {
    pub fn slot(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.slots[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.slots[id.0]
    }

    pub fn add(&mut self, id: ParamId, g: &Tensor<F>) {
        self.slots[id.0].add_assign(g);
    }

    pub fn merge(&mut self, other: &Gradients<F>) {
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            a.add_assign(b);
        }
    }

    pub fn clear(&mut self) {
        for s in &mut self.slots {
            s.fill(F::zero());
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor<F>> {
        self.slots.iter()
    }
}
