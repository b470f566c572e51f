use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{AutodiffError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

/// Adam first/second moments and step count for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Accumulated gradient; cleared by each optimizer step.
    pub grad: Option<Tensor<T>>,
    pub adam: AdamState<T>,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let n = value.len();
        Self {
            name: name.into(),
            value,
            grad: None,
            adam: AdamState { m: vec![T::zero(); n], v: vec![T::zero(); n], step: 0 },
        }
    }

    pub fn accumulate_grad(&mut self, g: &Tensor<T>, scale: T) {
        let mut g = g.clone();
        if scale != T::one() {
            g.scale_in_place(scale);
        }
        match &mut self.grad {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

/// Ordered collection of parameters addressed by dotted names.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<T> {
    params: Vec<Parameter<T>>,
    index: BTreeMap<String, usize>,
}

/// Handle to a parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), index: BTreeMap::new() }
    }

    pub fn insert(&mut self, param: Parameter<T>) -> Result<ParamId> {
        if self.index.contains_key(&param.name) {
            return Err(AutodiffError::Config(format!("duplicate parameter `{}`", param.name)));
        }
        let id = self.params.len();
        self.index.insert(param.name.clone(), id);
        self.params.push(param);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    /// Places every parameter in `graph` as a gradient-tracked leaf.
    pub fn bind(&self, graph: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|p| graph.variable(p.value.clone())).collect()
    }

    /// Adds `scale * grad` of each bound leaf into the parameter gradients.
    /// Leaves that received no gradient contribute zeros.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>, vars: &[Var], scale: T) {
        assert_eq!(vars.len(), self.params.len(), "bound variable count");
        for (p, &v) in self.params.iter_mut().zip(vars) {
            match graph.grad(v) {
                Some(g) => p.accumulate_grad(g, scale),
                None => {
                    if p.grad.is_none() {
                        p.grad = Some(Tensor::zeros(p.value.shape()));
                    }
                }
            }
        }
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Converts values to another precision; gradients and moments are reset.
    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self.params.iter().map(|p| Parameter::new(p.name.clone(), p.value.cast())).collect(),
            index: self.index.clone(),
        }
    }
}

/// Seeded Glorot-uniform initializer; biases start at zero.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot<T: Real>(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64_lossy(self.rng.random_range(-bound..bound))).collect();
        Tensor::from_vec(shape, data).expect("shape product matches")
    }

    /// Convolution kernel `[taps..., cin, cout]` plus zero bias `[cout]`.
    pub fn conv<T: Real>(&mut self, taps: &[usize], cin: usize, cout: usize) -> (Tensor<T>, Tensor<T>) {
        let k: usize = taps.iter().product();
        let mut shape = taps.to_vec();
        shape.extend([cin, cout]);
        (self.glorot(&shape, k * cin, k * cout), Tensor::zeros(&[cout]))
    }
}
