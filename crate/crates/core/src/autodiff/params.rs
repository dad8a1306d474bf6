use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::Rng;

use super::tape::{Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Named model parameters, ordered by name.
///
/// Values sit behind [`Arc`] so a frozen store can be shared across threads
/// and bound to many tapes without copying.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar = f32> {
    tensors: BTreeMap<String, Arc<Tensor<T>>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.tensors.insert(name.into(), Arc::new(value));
    }

    pub fn get(&self, name: &str) -> Result<&Arc<Tensor<T>>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name).map(Arc::make_mut)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Arc::new(v.cast::<U>())))
                .collect(),
        }
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn init_uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::cast(rng.gen_range(-bound..bound))).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("init shape"));
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) {
        self.insert(name, Tensor::full(shape.to_vec(), value));
    }
}

/// Lazily binds parameters of a [`ParamStore`] onto a tape as leaves.
pub struct Binder<'t, T: Scalar = f32> {
    tape: &'t Tape<T>,
    store: &'t ParamStore<T>,
    bound: RefCell<HashMap<String, Var<'t, T>>>,
}

impl<'t, T: Scalar> Binder<'t, T> {
    pub fn new(tape: &'t Tape<T>, store: &'t ParamStore<T>) -> Self {
        Self {
            tape,
            store,
            bound: RefCell::new(HashMap::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let var = self.tape.param(self.store.get(name)?.clone());
        self.bound.borrow_mut().insert(name.to_string(), var);
        Ok(var)
    }

    /// Gradients of every bound parameter reached by backward.
    pub fn grads(&self) -> BTreeMap<String, Vec<f64>> {
        self.bound
            .borrow()
            .iter()
            .filter_map(|(k, v)| self.tape.grad_f64(*v).map(|g| (k.clone(), g)))
            .collect()
    }

    /// `x · W + b` for parameters `{prefix}.weight` / `{prefix}.bias`.
    pub fn linear(&self, prefix: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let w = self.get(&format!("{prefix}.weight"))?;
        let y = x.matmul(w)?;
        match self.store.contains(&format!("{prefix}.bias")) {
            true => y.add_row(self.get(&format!("{prefix}.bias"))?),
            false => Ok(y),
        }
    }

    pub fn layer_norm(&self, prefix: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let g = self.get(&format!("{prefix}.gain"))?;
        let b = self.get(&format!("{prefix}.bias"))?;
        x.layer_norm(g, b, crate::LAYER_NORM_EPS)
    }
}

/// Registers `{prefix}.weight` `[d_in×d_out]` and, optionally, a zero bias.
pub fn init_linear<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    bias: bool,
    rng: &mut impl Rng,
) {
    store.init_uniform(&format!("{prefix}.weight"), &[d_in, d_out], d_in, d_out, rng);
    if bias {
        store.init_const(&format!("{prefix}.bias"), &[d_out], 0.0);
    }
}

pub fn init_layer_norm<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize) {
    store.init_const(&format!("{prefix}.gain"), &[d], 1.0);
    store.init_const(&format!("{prefix}.bias"), &[d], 0.0);
}
