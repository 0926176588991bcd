use std::collections::{BTreeMap, HashMap};
use std::ops::{Deref, DerefMut};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradient per parameter name.
pub type ParamGrads = BTreeMap<String, Vec<f64>>;

/// Named parameter collection. Iteration order is the sorted name order,
/// which fixes checkpoint layout and gradient reduction order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
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

    /// Total scalar count over tensors whose name satisfies `pred`.
    pub fn count_where(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.tensors
            .iter()
            .filter(|(n, _)| pred(n))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn extend(&mut self, other: ParamSet) {
        self.tensors.extend(other.tensors);
    }

    /// Removes and returns every tensor whose name satisfies `pred`.
    pub fn split_off(&mut self, pred: impl Fn(&str) -> bool) -> ParamSet {
        let names: Vec<String> = self.tensors.keys().filter(|n| pred(n)).cloned().collect();
        let mut out = ParamSet::new();
        for n in names {
            let t = self.tensors.remove(&n).unwrap();
            out.insert(n, t);
        }
        out
    }

    pub fn zero_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    /// Adds `grads` into each tensor's accumulator.
    pub fn accumulate(&mut self, grads: &ParamGrads) -> Result<()> {
        for (name, g) in grads {
            let t = self.tensors.get_mut(name).ok_or_else(|| {
                Error::Checkpoint(format!("gradient for unknown parameter {name}"))
            })?;
            if t.numel() != g.len() {
                return Err(Error::dim(
                    "accumulate",
                    "gradient length",
                    t.numel(),
                    g.len(),
                ));
            }
            t.accumulate_grad(g);
        }
        Ok(())
    }
}

/// A tape bound to a parameter set. Parameters are copied onto the tape on
/// first use; those accepted by the trainable predicate become gradient
/// leaves, the rest are constants.
pub struct Graph<'p> {
    tape: Tape,
    params: &'p ParamSet,
    trainable: Box<dyn Fn(&str) -> bool + 'p>,
    bound: HashMap<String, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet, trainable: impl Fn(&str) -> bool + 'p) -> Self {
        Graph {
            tape: Tape::new(),
            params,
            trainable: Box::new(trainable),
            bound: HashMap::new(),
        }
    }

    /// All parameters trainable.
    pub fn training(params: &'p ParamSet) -> Self {
        Graph::new(params, |_| true)
    }

    /// No parameter receives a gradient.
    pub fn inference(params: &'p ParamSet) -> Self {
        Graph::new(params, |_| false)
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    /// Handle to the named parameter on this tape.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let t = self.params.get(name)?;
        let v = if (self.trainable)(name) {
            self.tape.param(name, t)
        } else {
            self.tape.constant(t.clone())
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Backpropagates from a scalar loss and returns gradients of every
    /// trainable parameter touched by the computation.
    pub fn backward(&self, loss: Var) -> Result<ParamGrads> {
        let grads: Gradients = self.tape.backward(loss)?;
        Ok(grads.params(&self.tape))
    }
}

impl Deref for Graph<'_> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}

/// Backpropagates `loss` and accumulates the result into `params`' grad fields.
///
/// Calling it again without [`ParamSet::zero_grads`] keeps accumulating.
pub fn backward(graph: Graph<'_>, loss: Var, params: &mut ParamSet) -> Result<()> {
    let grads = graph.backward(loss)?;
    drop(graph);
    params.accumulate(&grads)
}
