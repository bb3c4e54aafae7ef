//! Reverse-mode automatic differentiation over `f64` ndarrays.
//!
//! A [`Tape`] records a computation as a flat list of nodes; [`Tape::backward`]
//! walks the list in reverse and accumulates gradients. Values are immutable
//! once recorded (`Rc<Arr>`), so backward closures can hold cheap clones of
//! whatever they need.
//!
//! Trainable parameters live outside the tape in a [`ParamStore`]; a step
//! inserts them as leaves via [`Tape::param`], runs forward + backward, and
//! hands the collected gradients to [`Adam`]. Everything is `f64`, which keeps
//! finite-difference gradient checks meaningful at tight tolerances.

mod adam;
mod conv;
mod ops;
mod store;

pub use adam::Adam;
pub use store::{ParamId, ParamStore, Registrar};

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

/// The array type used throughout the crate.
pub type Arr = ndarray::ArrayD<f64>;

type BackFn = Box<dyn Fn(&Arr, &mut dyn FnMut(usize, Arr))>;

struct Node {
    value: Rc<Arr>,
    back: Option<BackFn>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

/// A recorded computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    param_vars: RefCell<HashMap<usize, Var>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Arr, back: Option<BackFn>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            back,
        });
        Var(nodes.len() - 1)
    }

    /// Record a leaf. Gradients w.r.t. leaves are retained by `backward`.
    pub fn leaf(&self, value: Arr) -> Var {
        self.push(value, None)
    }

    /// Record a constant. Identical to [`Tape::leaf`]; the name documents
    /// intent at call sites (the gradient, if any, is simply never read).
    pub fn constant(&self, value: Arr) -> Var {
        self.push(value, None)
    }

    /// Scalar constant of shape `[]`.
    pub fn scalar(&self, value: f64) -> Var {
        self.constant(ndarray::arr0(value).into_dyn())
    }

    /// Insert a parameter from `store` as a leaf, deduplicated per tape so a
    /// parameter used twice accumulates one gradient. A tape must only ever
    /// see parameters from a single store.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.borrow().get(&id.index()) {
            return *v;
        }
        let v = self.leaf(store.value(id).clone());
        self.param_vars.borrow_mut().insert(id.index(), v);
        v
    }

    /// The value held by `v`.
    pub fn value(&self, v: Var) -> Rc<Arr> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    /// Scalar value of a 0-d or single-element node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1, "scalar_value on non-scalar node");
        val.iter().next().copied().unwrap()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Reverse pass from a scalar root. Returns gradients for every leaf
    /// reachable from the root; interior gradients are dropped as soon as
    /// they have been propagated.
    pub fn backward(&self, root: Var) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.0].value.len(),
            1,
            "backward requires a scalar root"
        );
        let mut grads: Vec<Option<Arr>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Arr::ones(nodes[root.0].value.raw_dim()));
        for id in (0..=root.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &nodes[id].back {
                Some(back) => {
                    back(&g, &mut |pid, pg| {
                        debug_assert!(pid < id, "backward edge must point to an earlier node");
                        match &mut grads[pid] {
                            Some(acc) => *acc += &pg,
                            slot @ None => *slot = Some(pg),
                        }
                    });
                }
                None => grads[id] = Some(g), // leaf: retain
            }
        }
        Grads { by_node: grads }
    }

    /// Gradients of the recorded parameters, keyed by store index.
    pub fn param_grads(&self, grads: &Grads) -> HashMap<usize, Arr> {
        self.param_vars
            .borrow()
            .iter()
            .filter_map(|(&idx, &var)| grads.get(var).map(|g| (idx, g.clone())))
            .collect()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    by_node: Vec<Option<Arr>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Arr> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }
}

#[cfg(test)]
mod tests;
