//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s together with
//! a backward closure. [`Graph::backward`] replays the tape in reverse and
//! returns the gradient of a scalar with respect to every leaf that asked for
//! one. Graphs are single-use: build one per forward pass and drop it after
//! reading gradients.
//!
//! Everything runs single-threaded in `f64`, so two passes over identical
//! inputs are bitwise identical.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Parent gradients produced by one backward closure.
pub type ParentGrads = Vec<(Var, Tensor)>;

type BackwardFn = Box<dyn FnOnce(&Tensor) -> ParentGrads>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<BTreeMap<String, Var>>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that records backward closures.
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), params: RefCell::new(BTreeMap::new()), grad_enabled: true }
    }

    /// A graph that only evaluates; nothing requires gradients.
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// The single value of a scalar node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// A value that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var {
        self.insert(Rc::new(value), false, None)
    }

    /// A leaf that receives a gradient when the graph records.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.insert(Rc::new(value), self.grad_enabled, None)
    }

    /// The leaf bound to parameter `name`, created on first use.
    ///
    /// Panics if `name` is not in `store`.
    pub fn param(&self, store: &ParamStore, name: &str) -> Var {
        if let Some(&v) = self.params.borrow().get(name) {
            return v;
        }
        let value = store.get_rc(name).unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        let v = self.insert(value, self.grad_enabled, None);
        self.params.borrow_mut().insert(name.to_string(), v);
        v
    }

    /// Parameters touched by this graph, by name.
    pub fn bound_params(&self) -> BTreeMap<String, Var> {
        self.params.borrow().clone()
    }

    /// Same value as `x`, cut from the tape.
    pub fn detach(&self, x: Var) -> Var {
        let value = self.value(x);
        self.insert(value, false, None)
    }

    /// Records a user-defined operation. `backward` receives the gradient of
    /// the output and returns gradients for any subset of `parents`.
    pub fn custom(
        &self,
        value: Tensor,
        parents: &[Var],
        backward: impl FnOnce(&Tensor) -> ParentGrads + 'static,
    ) -> Var {
        self.push(value, parents, backward)
    }

    pub(crate) fn push(
        &self,
        value: Tensor,
        parents: &[Var],
        backward: impl FnOnce(&Tensor) -> ParentGrads + 'static,
    ) -> Var {
        self.push_rc(Rc::new(value), parents, backward)
    }

    pub(crate) fn push_rc(
        &self,
        value: Rc<Tensor>,
        parents: &[Var],
        backward: impl FnOnce(&Tensor) -> ParentGrads + 'static,
    ) -> Var {
        let requires = self.grad_enabled && parents.iter().any(|&p| self.requires_grad(p));
        let bw: Option<BackwardFn> = if requires { Some(Box::new(backward)) } else { None };
        self.insert(value, requires, bw)
    }

    fn insert(&self, value: Rc<Tensor>, requires_grad: bool, backward: Option<BackwardFn>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, requires_grad, backward });
        Var(nodes.len() - 1)
    }

    /// Reverse sweep from the scalar `loss`. Consumes the recorded closures,
    /// so it can run once per graph.
    pub fn backward(&self, loss: Var) -> Gradients {
        let n = self.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let seed_shape = self.shape(loss);
        assert_eq!(seed_shape.iter().product::<usize>(), 1, "backward() needs a scalar loss");
        if !self.requires_grad(loss) {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Tensor::full(seed_shape, 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let bw = self.nodes.borrow_mut()[i].backward.take();
            match bw {
                Some(f) => {
                    for (p, pg) in f(&g) {
                        if !self.requires_grad(p) {
                            continue;
                        }
                        match &mut grads[p.0] {
                            Some(acc) => acc.add_assign(&pg),
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
                None => grads[i] = Some(g),
            }
        }
        Gradients { grads }
    }
}

/// Leaf gradients returned by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Gradients of every parameter bound on `graph`; parameters the loss
    /// does not reach get zeros.
    pub fn params(mut self, graph: &Graph) -> BTreeMap<String, Tensor> {
        graph
            .bound_params()
            .into_iter()
            .map(|(name, v)| {
                let g = self.take(v).unwrap_or_else(|| Tensor::zeros(graph.shape(v)));
                (name, g)
            })
            .collect()
    }
}
