//! Named trainable parameters, initialization and the SGD update.

use std::collections::HashMap;

use crate::autodiff::{Gradients, Graph};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub momentum: Tensor<T>,
}

/// Ordered parameter collection. Order is registration order and defines
/// checkpoint layout.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id.0);
        let shape = value.shape().to_vec();
        self.params.push(Parameter {
            name,
            value,
            grad: Tensor::zeros(&shape),
            momentum: Tensor::zeros(&shape),
        });
        Ok(id)
    }

    /// Variance-preserving uniform weights: `U(-b, b)` with `b = sqrt(3 / fan_in)`.
    pub fn add_fan_in_uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut Rng) -> Result<ParamId> {
        let bound = (3.0 / fan_in as f64).sqrt();
        self.add(name, Tensor::uniform(shape, -bound, bound, rng))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::ones(shape))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
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

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    /// Total scalar count, optionally restricted to a name prefix.
    pub fn count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    /// Adds the tape gradients of the bound parameter leaves into `grad`.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>, grads: &Gradients<T>) {
        for (p, &v) in self.params.iter_mut().zip(graph.param_vars()) {
            if let Some(g) = grads.get(v) {
                for (a, &b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
    }

    /// Global L2 norm of all gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data().iter())
            .map(|v| v.to_f64c().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global norm is at most `max_norm`;
    /// returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm.is_finite() {
            let k = T::from_f64c(max_norm / norm);
            for p in &mut self.params {
                p.grad.data_mut().iter_mut().for_each(|v| *v *= k);
            }
        }
        norm
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// SGD with heavy-ball momentum and L2 weight decay:
    /// `v ← μ·v + g + λ·w`, `w ← w − lr·v`. Gradients are zeroed afterwards.
    /// Nothing is updated if any gradient is non-finite.
    pub fn sgd_step(&mut self, cfg: &SgdConfig) -> Result<()> {
        if let Some(bad) = self.params.iter().find(|p| !p.grad.all_finite()) {
            return Err(Error::NonFiniteGradient(bad.name.clone()));
        }
        let lr = T::from_f64c(cfg.lr);
        let mu = T::from_f64c(cfg.momentum);
        let wd = T::from_f64c(cfg.weight_decay);
        for p in &mut self.params {
            let w = p.value.data_mut();
            let v = p.momentum.data_mut();
            for ((wi, vi), &gi) in w.iter_mut().zip(v.iter_mut()).zip(p.grad.data()) {
                *vi = mu * *vi + gi + wd * *wi;
                *wi -= lr * *vi;
            }
        }
        self.zero_grads();
        Ok(())
    }
}
