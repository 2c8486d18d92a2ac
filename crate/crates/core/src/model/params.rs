//! Named parameter storage and its binding onto a tape.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Ordered, named collection of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<F: Real> {
    names: Vec<String>,
    values: Vec<Arc<Tensor<F>>>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl<F: Real> ParamStore<F> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().map(|v| &**v))
    }

    pub fn tensors(&self) -> Vec<Tensor<F>> {
        self.values.iter().map(|v| (**v).clone()).collect()
    }

    pub(crate) fn push(&mut self, name: String, value: Tensor<F>) -> ParamId {
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    /// Replace every value; shapes must match the current ones.
    pub fn set_all(&mut self, values: Vec<Tensor<F>>) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::shape(
                "set_all",
                format!("{} tensors for {} parameters", values.len(), self.values.len()),
            ));
        }
        for (i, v) in values.iter().enumerate() {
            if v.shape() != self.values[i].shape() {
                return Err(Error::shape(
                    "set_all",
                    format!("{}: {:?} vs {:?}", self.names[i], v.shape(), self.values[i].shape()),
                ));
            }
        }
        self.values = values.into_iter().map(Arc::new).collect();
        Ok(())
    }

    /// Mutable access for in-place optimiser updates.
    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor<F>> {
        self.values.iter_mut().map(Arc::make_mut)
    }

    /// Add uniform noise in `±scale` to every parameter.
    pub fn jitter(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in self.values_mut() {
            for x in v.data_mut() {
                *x = *x + F::lit(rng.random_range(-scale..scale));
            }
        }
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| Arc::new(v.cast())).collect(),
        }
    }

    /// Put every parameter on `tape`; `trainable` controls gradient tracking.
    pub fn bind<'t>(&self, tape: &'t Tape<F>, trainable: bool) -> Params<'t, F> {
        Params(
            self.values
                .iter()
                .map(|v| tape.leaf(Arc::clone(v), trainable))
                .collect(),
        )
    }
}

/// Parameters of one store as variables of one tape.
#[derive(Debug, Clone)]
pub struct Params<'t, F: Real>(Vec<Var<'t, F>>);

impl<'t, F: Real> Params<'t, F> {
    /// Use existing variables, in store order, as the parameters.
    pub fn from_vars(vars: Vec<Var<'t, F>>) -> Self {
        Params(vars)
    }

    pub fn get(&self, id: ParamId) -> Var<'t, F> {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var<'t, F>] {
        &self.0
    }
}

/// Build a component with its own parameter store.
pub(crate) fn standalone<F: Real, T>(seed: u64, build: impl FnOnce(&mut Init<'_, F>) -> T) -> (T, ParamStore<F>) {
    let mut store = ParamStore::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let item = build(&mut Init::new(&mut store, &mut rng));
    (item, store)
}

/// Creates parameters under a hierarchical name prefix.
pub(crate) struct Init<'a, F: Real> {
    store: &'a mut ParamStore<F>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, F: Real> Init<'a, F> {
    pub(crate) fn new(store: &'a mut ParamStore<F>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub(crate) fn scope(&mut self, name: impl std::fmt::Display) -> Init<'_, F> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Init {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    pub(crate) fn constant(&mut self, leaf: &str, shape: &[usize], value: f64) -> ParamId {
        let name = self.name(leaf);
        self.store.push(name, Tensor::full(shape, F::lit(value)))
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub(crate) fn fan_in_uniform(&mut self, leaf: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| F::lit(rng.random_range(-bound..bound)));
        let name = self.name(leaf);
        self.store.push(name, t)
    }
}
