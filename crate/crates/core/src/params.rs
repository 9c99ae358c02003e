//! Named parameter arrays and their binding onto a differentiation tape.

use std::collections::{BTreeMap, HashMap};

use numerics::{Gradients, Graph, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    /// Frozen arrays are never bound as trainable and never updated.
    pub frozen: bool,
}

/// Ordered bundle of named arrays: every trainable module plus frozen constants.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, frozen: bool) {
        self.params.insert(name.into(), Param { value, frozen });
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::usage(format!("unknown parameter `{name}`")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
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

    /// Total number of scalar values in trainable (non-frozen) arrays.
    pub fn trainable_count(&self) -> usize {
        self.params
            .values()
            .filter(|p| !p.frozen)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, p)| p.value.numel())
            .sum()
    }
}

/// Gaussian-initialized matrix.
pub fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
        .expect("shape")
}

/// Forward-pass context: a fresh tape plus lazily bound parameters.
pub struct Ctx<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    bound: HashMap<String, Var>,
    trainable: bool,
}

impl<'a> Ctx<'a> {
    /// Context whose non-frozen parameters receive gradients.
    pub fn train(store: &'a ParamStore) -> Self {
        Self {
            g: Graph::new(),
            store,
            bound: HashMap::new(),
            trainable: true,
        }
    }

    /// Context where every parameter is a constant.
    pub fn infer(store: &'a ParamStore) -> Self {
        Self {
            trainable: false,
            ..Self::train(store)
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let param = self.store.get(name)?;
        let v = if self.trainable && !param.frozen {
            self.g.param(param.value.clone())
        } else {
            self.g.constant(param.value.clone())
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.g.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.g.value(v)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.g.value(v).data()[0]
    }

    /// `x · W + b` with `W = {prefix}.w`, `b = {prefix}.b`.
    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        let y = self.g.matmul(x, w)?;
        Ok(self.g.add_row(y, b)?)
    }

    /// Row layer norm with learned gain `{prefix}.g` and bias `{prefix}.b`.
    pub fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gain = self.p(&format!("{prefix}.g"))?;
        let bias = self.p(&format!("{prefix}.b"))?;
        let n = self.g.normalize_rows(x, 1e-5);
        let y = self.g.mul_row(n, gain)?;
        Ok(self.g.add_row(y, bias)?)
    }

    /// Reverse pass from a scalar, returning gradients keyed by parameter name.
    pub fn gradients(&self, loss: Var) -> Result<BTreeMap<String, Tensor>> {
        let grads: Gradients = self.g.backward(loss)?;
        let mut out = BTreeMap::new();
        for (name, &v) in &self.bound {
            if let Some(t) = grads.get(v) {
                out.insert(name.clone(), t.clone());
            }
        }
        Ok(out)
    }
}

/// Largest `|analytic − central difference| / max(1, |central difference|)`
/// over every coordinate of the named parameters, for a scalar loss built by
/// `f`. `f` must be deterministic.
pub fn param_grad_check<F>(store: &ParamStore, names: &[&str], eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Ctx) -> Result<Var>,
{
    let mut ctx = Ctx::train(store);
    let loss = f(&mut ctx)?;
    let grads = ctx.gradients(loss)?;
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut c = Ctx::infer(s);
        let l = f(&mut c)?;
        Ok(c.scalar(l))
    };
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for &name in names {
        let n = store.tensor(name)?.numel();
        for i in 0..n {
            let orig = store.tensor(name)?.data()[i];
            probe.get_mut(name).expect("present").value.data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe.get_mut(name).expect("present").value.data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe.get_mut(name).expect("present").value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grads.get(name).map_or(0.0, |g| g.data()[i]);
            worst = worst.max((analytic - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    Ok(worst)
}

pub fn init_linear(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, fan_in: usize, fan_out: usize) {
    let std = (1.0 / fan_in as f64).sqrt();
    store.insert(format!("{prefix}.w"), normal_matrix(rng, fan_in, fan_out, std), false);
    store.insert(format!("{prefix}.b"), Tensor::zeros(1, fan_out), false);
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.insert(format!("{prefix}.g"), Tensor::full(1, dim, 1.0), false);
    store.insert(format!("{prefix}.b"), Tensor::zeros(1, dim), false);
}
