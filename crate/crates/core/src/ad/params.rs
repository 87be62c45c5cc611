use std::collections::BTreeMap;

use rand::Rng;

use super::graph::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named parameter tensors. Iteration order is the lexicographic name order,
/// which fixes the layout of checkpoints and optimizer state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn extend(&mut self, other: ParamSet) {
        self.tensors.extend(other.tensors);
    }

    /// Checks `name` exists with exactly `shape`.
    pub fn expect_shape(&self, name: &str, shape: &[usize]) -> Result<()> {
        let t = self.get(name)?;
        if t.shape() != shape {
            return Err(Error::Config(format!(
                "parameter '{name}' has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(())
    }

    /// Registers every tensor as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        self.bind_with(g, true)
    }

    /// Registers every tensor as a constant (inference).
    pub fn bind_const(&self, g: &mut Graph) -> Bound {
        self.bind_with(g, false)
    }

    fn bind_with(&self, g: &mut Graph, grad: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let t = t.clone();
                (k.clone(), if grad { g.variable(t) } else { g.constant(t) })
            })
            .collect();
        Bound { vars }
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }
}

/// Graph handles for a bound [`ParamSet`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Binds `names[i]` to `vars[i]`.
    pub fn from_vars<S: AsRef<str>>(names: &[S], vars: &[Var]) -> Self {
        Bound {
            vars: names.iter().map(|n| n.as_ref().to_owned()).zip(vars.iter().copied()).collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Collects the gradient of every bound parameter.
    pub fn grads(&self, grads: &Gradients) -> ParamSet {
        ParamSet {
            tensors: self
                .vars
                .iter()
                .map(|(k, &v)| (k.clone(), grads.get(v)))
                .collect(),
        }
    }
}

/// Uniform weights in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn fan_in_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Kaiming-uniform weights (bound `sqrt(6 / fan_in)`).
pub fn kaiming_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}
