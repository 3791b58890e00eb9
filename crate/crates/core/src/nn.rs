//! Named parameter collections and initializers shared by the models.

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};

use crate::autograd::{Grads, Graph, Real, Var};
use crate::error::{Error, Result};
use crate::rng::DetRng;

/// Ordered set of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T: Real> {
    names: Vec<String>,
    tensors: Vec<ArrayD<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: ArrayD<T>) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = tensor;
            return;
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn expect(&self, name: &str) -> &ArrayD<T> {
        self.get(name)
            .unwrap_or_else(|| panic!("missing parameter tensor `{name}`"))
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[ArrayD<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ArrayD<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(ArrayD::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = Self::new();
        for (n, t) in self.iter() {
            out.insert(n, ArrayD::zeros(t.raw_dim()));
        }
        out
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for (n, t) in self.iter() {
            out.insert(n, t.mapv(|v| U::c(v.f64())));
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Name of the first tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.iter()
            .find(|(_, t)| t.iter().any(|v| !v.is_finite()))
            .map(|(n, _)| n)
    }

    /// Elementwise `self += other`; both sets must share names and shapes.
    pub fn add_assign(&mut self, other: &ParamSet<T>) {
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            *dst += src;
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in &mut self.tensors {
            t.mapv_inplace(|v| v * s);
        }
    }

    /// Checks that `other` carries exactly the same tensor names and shapes.
    pub fn check_congruent<U: Real>(&self, other: &ParamSet<U>) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Config("parameter names differ".into()));
        }
        for ((n, a), b) in self.iter().zip(&other.tensors) {
            if a.shape() != b.shape() {
                return Err(Error::Shape(format!("tensor `{n}` shape differs")));
            }
        }
        Ok(())
    }

    /// Places every tensor on `graph` as a trainable leaf.
    pub fn bind<'a>(&'a self, graph: &Graph<T>) -> Bound<'a, T> {
        let vars = self
            .tensors
            .iter()
            .map(|t| graph.param(t.clone()))
            .collect();
        Bound { set: self, vars }
    }

    /// Places every tensor on `graph` as a constant.
    pub fn bind_constant<'a>(&'a self, graph: &Graph<T>) -> Bound<'a, T> {
        let vars = self
            .tensors
            .iter()
            .map(|t| graph.input(t.clone()))
            .collect();
        Bound { set: self, vars }
    }
}

/// A [`ParamSet`] placed on a graph.
pub struct Bound<'a, T: Real> {
    set: &'a ParamSet<T>,
    vars: Vec<Var>,
}

impl<T: Real> Bound<'_, T> {
    pub fn var(&self, name: &str) -> Var {
        let i = self
            .set
            .position(name)
            .unwrap_or_else(|| panic!("missing parameter tensor `{name}`"));
        self.vars[i]
    }

    /// Gradients of every bound tensor (zeros where none flowed).
    pub fn gradients(&self, grads: &mut Grads<T>) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for ((name, t), &v) in self.set.iter().zip(&self.vars) {
            let g = grads.take(v).unwrap_or_else(|| ArrayD::zeros(t.raw_dim()));
            out.insert(name, g);
        }
        out
    }
}

/// Normal(0, std) tensor.
pub fn normal<T: Real>(rng: &mut DetRng, shape: &[usize], std: f64) -> ArrayD<T> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || T::c(rng.normal() * std))
}

/// He-normal init for a conv weight `[O, C, k, k]`.
pub fn conv_weight<T: Real>(rng: &mut DetRng, out_c: usize, in_c: usize, k: usize) -> ArrayD<T> {
    let fan_in = (in_c * k * k) as f64;
    normal(rng, &[out_c, in_c, k, k], (2.0 / fan_in).sqrt())
}

pub fn zeros<T: Real>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones<T: Real>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::from_elem(IxDyn(shape), T::one())
}

/// Sums per-example gradient sets in a fixed order.
pub fn reduce_in_order<T: Real>(mut parts: Vec<ParamSet<T>>) -> Option<ParamSet<T>> {
    if parts.is_empty() {
        return None;
    }
    let mut acc = parts.remove(0);
    for p in &parts {
        acc.add_assign(p);
    }
    Some(acc)
}
