//! Named learnable tensors with gradient slots.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph};
use crate::tensor::{numel, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Parameters keyed by dotted name (`cats.enc0.intra.q.w`, ...). Iteration
/// order is the lexicographic name order, which fixes checkpoint layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Argument(format!("parameter `{name}` registered twice")));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.insert(name.to_string(), Param { value, grad });
        Ok(())
    }

    /// Uniform fan-in scaled init, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn insert_fan_in<R: Rng>(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut R) -> Result<()> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-bound..bound)));
        self.insert(name, t)
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn insert_ones(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::full(shape, T::one()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.params.get(name).ok_or_else(|| Error::Argument(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.params.get_mut(name).ok_or_else(|| Error::Argument(format!("unknown parameter `{name}`")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(name)?.value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Learnable scalars under a name prefix.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, p)| numel(p.value.shape()))
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds the gradients of every parameter bound into `graph` to the
    /// store's slots. Parameters the loss does not reach get nothing added.
    pub fn accumulate(&mut self, graph: &Graph<T>, grads: &Gradients<T>) -> Result<()> {
        for (name, var) in graph.bound_params() {
            let Some(g) = grads.get(*var) else { continue };
            let p = self.get_mut(name)?;
            for (d, &s) in p.grad.data_mut().iter_mut().zip(g) {
                *d = *d + s;
            }
        }
        Ok(())
    }

    /// Sets every parameter whose name ends with one of `suffixes` to zero.
    pub fn zero_matching(&mut self, suffixes: &[&str]) -> usize {
        let mut n = 0;
        for (name, p) in self.params.iter_mut() {
            if suffixes.iter().any(|s| name.ends_with(s)) {
                p.value.data_mut().iter_mut().for_each(|v| *v = T::zero());
                n += 1;
            }
        }
        n
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| (k.clone(), Param { value: p.value.cast(), grad: p.grad.cast() }))
                .collect(),
        }
    }
}
