use std::ops::Index;

use crate::error::{Error, Result};
use crate::tensor::{Grads, Rng, Scalar, Tape, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Buffers (e.g. a running center) are stored and checkpointed but never
    /// bound as trainable leaves.
    pub trainable: bool,
}

/// Named, ordered collection of model tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

/// Tape variables for every entry of a store, from one [`ParamStore::bind`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Binding over caller-provided variables, one per store entry in order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    fn insert(&mut self, name: String, value: Tensor<T>, trainable: bool) -> ParamId {
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter {name}"
        );
        let grad = Tensor::zeros(value.shape().to_vec());
        self.entries.push(ParamEntry {
            name,
            value,
            grad,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.insert(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.insert(name.into(), value, false)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].grad
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Trainable scalars whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable && e.name.starts_with(prefix))
            .map(|e| e.value.len())
            .sum()
    }

    /// Places every entry on `tape`. Trainable entries become gradient
    /// leaves when `trainable` is set; everything else is constant.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if trainable && e.trainable {
                    tape.leaf(e.value.clone())
                } else {
                    tape.constant(e.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Adds the gradients of the bound leaves into each entry's `grad`.
    pub fn accumulate(&mut self, grads: &Grads<T>, bound: &Bound) {
        for (e, &v) in self.entries.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.get(v) {
                for (a, &b) in e.grad.data_mut().iter_mut().zip(g) {
                    *a = *a + b;
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Same names and shapes in the same order.
    pub fn same_layout<U: Scalar>(&self, other: &ParamStore<U>) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    grad: e.grad.cast(),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }

    /// Overwrites values from `other`, matched by position; layouts must agree.
    pub fn copy_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::contract("copy_from: parameter layouts differ"));
        }
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            a.value = b.value.clone();
        }
        Ok(())
    }
}

// ── Initializers ─────────────────────────────────────────────────────

pub mod init {
    use super::*;

    pub fn zeros<T: Scalar>(shape: &[usize]) -> Tensor<T> {
        Tensor::zeros(shape.to_vec())
    }

    pub fn ones<T: Scalar>(shape: &[usize]) -> Tensor<T> {
        Tensor::full(shape.to_vec(), T::one())
    }

    pub fn normal<T: Scalar>(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::cast(rng.normal() * std)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape")
    }

    pub fn uniform<T: Scalar>(rng: &mut Rng, shape: &[usize], bound: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::cast(rng.uniform_range(-bound, bound)))
            .collect();
        Tensor::new(shape.to_vec(), data).expect("shape")
    }

    /// Glorot uniform: `U(±sqrt(6 / (fan_in + fan_out)))`.
    pub fn xavier_uniform<T: Scalar>(
        rng: &mut Rng,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
    ) -> Tensor<T> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        uniform(rng, shape, bound)
    }
}
