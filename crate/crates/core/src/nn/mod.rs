//! Parameter registry and the layers the separation model is assembled from.

mod checkpoint;
mod layers;
mod multiscale;

pub use checkpoint::{load_params, read_tensors, save_params, write_tensors, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use layers::{Conv1d, ConvTranspose1d, DepthwiseConv1d, GlobalLayerNorm, PRelu, GLN_EPS, PRELU_INIT};
pub use multiscale::MultiScaleBlock;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Insertion-ordered map from dotted names to trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("parameter {name} registered twice")));
        }
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push((name, tensor.with_grad()));
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    /// Total element count over all parameters.
    pub fn count_params(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in &mut self.entries {
            t.zero_grad();
        }
    }

    /// Places every parameter on `g` as a tracked leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound { vars: self.entries.iter().map(|(_, t)| g.leaf(t)).collect() }
    }

    /// Places every parameter on `g` as a constant (inference).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound { vars: self.entries.iter().map(|(_, t)| g.constant(t.clone())).collect() }
    }

    /// `+=` the gradients recorded for `bound` into each parameter's grad buffer.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients) -> Result<()> {
        for ((_, t), v) in self.entries.iter_mut().zip(&bound.vars) {
            grads.accumulate_into(*v, t)?;
        }
        Ok(())
    }

    /// Flattened gradients in store order; absent grads read as zeros.
    pub fn collect_grads(&self, bound: &Bound, grads: &Gradients) -> Vec<Vec<f64>> {
        self.entries
            .iter()
            .zip(&bound.vars)
            .map(|((_, t), v)| grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect()
    }
}

/// Max relative error between tape gradients of a scalar objective over
/// the store's parameters and central differences, at the `(param, element)`
/// probes given.
pub fn grad_check_params<F>(store: &ParamStore, f: F, probes: &[(ParamId, usize)], eps: f64) -> Result<f64>
where
    F: Fn(&ParamStore, &mut Graph, &Bound) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Contract(format!("grad_check eps must lie in (0, 1e-2], got {eps}")));
    }
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let loss = f(store, &mut g, &bound)?;
    let grads = g.backward(loss)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let b = s.bind_frozen(&mut g);
        let out = f(s, &mut g, &b)?;
        let v = g.value(out).data()[0];
        if !v.is_finite() {
            return Err(Error::Evaluation(format!("objective is {v} at a perturbed point")));
        }
        Ok(v)
    };

    let mut work = store.clone();
    let mut worst: f64 = 0.0;
    for &(id, i) in probes {
        let orig = store.get(id).data()[i];
        work.get_mut(id).data_mut()[i] = orig + eps;
        let plus = eval(&work)?;
        work.get_mut(id).data_mut()[i] = orig - eps;
        let minus = eval(&work)?;
        work.get_mut(id).data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = grads.get(bound.var(id)).map_or(0.0, |g| g[i]);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Graph handles for a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}
