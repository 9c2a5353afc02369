//! Named parameter tensors and their binding onto a [`Graph`].

use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// An ordered name → tensor map. Every model's weights live in one of these.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Option<Tensor<T>> {
        self.tensors.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors.get_mut(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Same names, all-zero tensors.
    pub fn zeros_like(&self) -> Self {
        Self { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Keeps only the entries for which `keep` returns true.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> Self {
        Self {
            tensors: self.tensors.iter().filter(|(k, _)| keep(k)).map(|(k, v)| (k.clone(), v.clone())).collect(),
        }
    }

    /// `self += alpha * other` for every name present in `other`.
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        for (name, t) in &other.tensors {
            let dst = self.get_mut(name)?;
            dst.expect_same_shape(t, name)?;
            dst.axpy(alpha, t);
        }
        Ok(())
    }

    pub fn sq_norm(&self) -> T {
        self.tensors.values().map(Tensor::sq_norm).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Largest absolute elementwise difference over the shared names.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.tensors
            .iter()
            .filter_map(|(k, v)| other.tensors.get(k).map(|o| v.max_abs_diff(o)))
            .fold(T::zero(), T::max)
    }
}

impl<T> IntoIterator for ParamSet<T> {
    type Item = (String, Tensor<T>);
    type IntoIter = std::collections::btree_map::IntoIter<String, Tensor<T>>;

    fn into_iter(self) -> Self::IntoIter {
        self.tensors.into_iter()
    }
}

impl<T> FromIterator<(String, Tensor<T>)> for ParamSet<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        Self { tensors: iter.into_iter().collect() }
    }
}

/// Lazily registers parameters of a [`ParamSet`] on a graph.
///
/// With `trainable` the parameters become gradient leaves; otherwise they
/// are constants and the forward pass records no backward closures.
pub struct Binding<'a, T: Scalar> {
    graph: &'a Graph<T>,
    params: &'a ParamSet<T>,
    trainable: bool,
    vars: RefCell<BTreeMap<String, Var>>,
}

impl<'a, T: Scalar> Binding<'a, T> {
    pub fn new(graph: &'a Graph<T>, params: &'a ParamSet<T>, trainable: bool) -> Self {
        Self { graph, params, trainable, vars: RefCell::new(BTreeMap::new()) }
    }

    pub fn graph(&self) -> &'a Graph<T> {
        self.graph
    }

    pub fn params(&self) -> &'a ParamSet<T> {
        self.params
    }

    pub fn has(&self, name: &str) -> bool {
        self.params.contains(name)
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.borrow().get(name) {
            return Ok(*v);
        }
        let t = self.params.get(name)?.clone();
        let v = if self.trainable { self.graph.leaf(t) } else { self.graph.constant(t) };
        self.vars.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    pub fn opt_var(&self, name: &str) -> Result<Option<Var>> {
        if self.has(name) {
            self.var(name).map(Some)
        } else {
            Ok(None)
        }
    }

    /// Names of the parameters the forward pass actually touched.
    pub fn bound_names(&self) -> Vec<String> {
        self.vars.borrow().keys().cloned().collect()
    }

    /// Gradients for every parameter; untouched parameters get zeros.
    pub fn gradients(&self, grads: &Gradients<T>) -> ParamSet<T> {
        let vars = self.vars.borrow();
        self.params
            .iter()
            .map(|(name, t)| {
                let g = vars
                    .get(name)
                    .and_then(|v| grads.get(*v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(t.shape()));
                (name.clone(), g)
            })
            .collect()
    }
}
