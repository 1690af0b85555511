//! Named parameter storage and the per-forward binding context.

use std::collections::HashMap;

use rand::{Rng, RngCore};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered table of named parameters. Names are dotted paths and unique.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Replaces every value, checking names and shapes line up.
    pub fn load(&mut self, named: &[(String, Tensor<T>)]) -> Result<()> {
        if named.len() != self.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} tensors, got {}",
                self.len(),
                named.len()
            )));
        }
        for (i, (name, t)) in named.iter().enumerate() {
            if *name != self.names[i] || t.shape() != self.values[i].shape() {
                return Err(Error::InvalidArgument(format!(
                    "tensor {i}: expected {} {:?}, got {name} {:?}",
                    self.names[i],
                    self.values[i].shape(),
                    t.shape()
                )));
            }
        }
        for (slot, (_, t)) in self.values.iter_mut().zip(named) {
            *slot = t.clone();
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Name and shape of one parameter, as recorded by a dry build.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

enum Sink<'a, T> {
    Store(&'a mut ParamStore<T>),
    /// Records names and shapes without allocating values.
    Dry(&'a mut Vec<ParamSpec>),
}

/// Registers parameters under a dotted prefix and draws their initial values.
pub struct Builder<'a, T, R> {
    sink: Sink<'a, T>,
    rng: &'a mut R,
    prefix: String,
}

impl<'a, T: Scalar, R: Rng> Builder<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R) -> Self {
        Self {
            sink: Sink::Store(store),
            rng,
            prefix: String::new(),
        }
    }

    /// A builder that only records the parameter table. Ids handed out are
    /// the positions the parameters would occupy in a real build.
    pub fn dry(specs: &'a mut Vec<ParamSpec>, rng: &'a mut R) -> Self {
        Self {
            sink: Sink::Dry(specs),
            rng,
            prefix: String::new(),
        }
    }

    /// A builder whose names are nested under `name`.
    pub fn scope(&mut self, name: &str) -> Builder<'_, T, R> {
        let prefix = self.full_name(name);
        let sink = match &mut self.sink {
            Sink::Store(s) => Sink::Store(&mut **s),
            Sink::Dry(v) => Sink::Dry(&mut **v),
        };
        Builder {
            sink,
            rng: &mut *self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn register(&mut self, name: &str, shape: &[usize], value: impl FnOnce(&mut R) -> Tensor<T>) -> Result<ParamId> {
        let full = self.full_name(name);
        match &mut self.sink {
            Sink::Store(store) => {
                let v = value(self.rng);
                store.add(full, v)
            }
            Sink::Dry(specs) => {
                if specs.iter().any(|s| s.name == full) {
                    return Err(Error::InvalidArgument(format!("duplicate parameter name {full}")));
                }
                specs.push(ParamSpec {
                    name: full,
                    shape: shape.to_vec(),
                });
                Ok(ParamId(specs.len() - 1))
            }
        }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn fan_in_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.register(name, shape, |rng| Tensor::rand_uniform(shape, -bound, bound, rng))
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.register(name, shape, |_| Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.register(name, shape, |_| Tensor::ones(shape))
    }
}

/// One forward pass: a graph plus lazily bound parameter leaves.
pub struct Forward<'a, T> {
    pub graph: Graph<T>,
    params: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    dropout_rng: Option<&'a mut dyn RngCore>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    /// A recording pass; dropout is active iff `dropout_rng` is given.
    pub fn train(params: &'a ParamStore<T>, dropout_rng: Option<&'a mut dyn RngCore>) -> Self {
        Self {
            graph: Graph::new(),
            bound: vec![None; params.len()],
            params,
            dropout_rng,
        }
    }

    /// A non-recording, dropout-free pass.
    pub fn eval(params: &'a ParamStore<T>) -> Self {
        Self {
            graph: Graph::inference(),
            bound: vec![None; params.len()],
            params,
            dropout_rng: None,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.graph.leaf(self.params.get(id).clone(), true);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        match self.dropout_rng.as_deref_mut() {
            Some(rng) if p > 0.0 => self.graph.dropout(x, p, rng),
            _ => Ok(x),
        }
    }

    /// Gradients per parameter after `graph.backward`; `None` for parameters
    /// the pass never touched.
    pub fn param_grads(&self) -> Vec<Option<Tensor<T>>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| self.graph.grad(v)))
            .collect()
    }
}
