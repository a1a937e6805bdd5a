//! Minimal tape-based reverse-mode autodiff over `ndarray` tensors.
//!
//! A [`Graph`] is built fresh for every forward pass. Operations append
//! nodes to the tape; [`Graph::backward`] walks the tape once in reverse
//! and returns per-node gradients. Model parameters live outside the
//! graph in a [`ParamStore`] and are bound into a graph as leaves, so a
//! frozen model can be bound as constants and contributes no backward
//! work at all.
//!
//! Everything is `f32` with `f64` accumulation in reductions. All kernels
//! are single-threaded and allocation-order deterministic: two identical
//! forward/backward passes produce bit-identical results.

mod conv;
mod nn_ops;
pub mod numcheck;
mod ops;
#[cfg(test)]
mod tests;

use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{ArrayD, IxDyn};

pub use conv::{conv2d_reference, conv3d_reference};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackwardFn = Box<dyn FnOnce(&ArrayD<f32>) -> Vec<Option<ArrayD<f32>>>>;

struct BackwardStep {
    parents: Vec<usize>,
    apply: BackwardFn,
}

struct Node {
    value: Rc<ArrayD<f32>>,
    requires_grad: bool,
    backward: Option<BackwardStep>,
}

/// One forward pass worth of tape.
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    /// (store uid, param index) -> bound leaf, so a parameter used twice
    /// (e.g. heads shared across decoder layers) accumulates into one slot.
    bindings: HashMap<(u64, usize), Var>,
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
            bindings: HashMap::new(),
        }
    }

    /// A graph that records values only; every op becomes a constant and
    /// backward is unavailable. Used for frozen-teacher and eval forwards.
    pub fn no_grad() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: false,
            bindings: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<f32> {
        &self.nodes[v.0].value
    }

    pub fn value_rc(&self, v: Var) -> Rc<ArrayD<f32>> {
        Rc::clone(&self.nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Extract a 0-dim node's value.
    pub fn scalar_value(&self, v: Var) -> f32 {
        let val = self.value(v);
        assert!(
            val.ndim() == 0 || val.len() == 1,
            "scalar_value on non-scalar shape {:?}",
            val.shape()
        );
        *val.iter().next().expect("empty tensor")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Insert a constant leaf (no gradient is ever produced for it).
    pub fn constant(&mut self, value: ArrayD<f32>) -> Var {
        self.push(Rc::new(value), false, None)
    }

    pub fn constant_rc(&mut self, value: Rc<ArrayD<f32>>) -> Var {
        self.push(value, false, None)
    }

    pub fn scalar(&mut self, value: f32) -> Var {
        self.constant(ndarray::arr0(value).into_dyn())
    }

    /// Insert a differentiable leaf not backed by a parameter store
    /// (used in tests and gradient checks).
    pub fn input(&mut self, value: ArrayD<f32>) -> Var {
        let rg = self.grad_enabled;
        self.push(Rc::new(value), rg, None)
    }

    /// Bind a parameter as a leaf. Repeated binds of the same parameter
    /// return the same node.
    pub fn bind(&mut self, binder: &Binder<'_>, id: ParamId) -> Var {
        let key = (binder.store.uid, id.0);
        if let Some(&v) = self.bindings.get(&key) {
            return v;
        }
        let rg = self.grad_enabled && binder.trainable;
        let v = self.push(Rc::clone(&binder.store.params[id.0].value), rg, None);
        self.bindings.insert(key, v);
        v
    }

    fn push(&mut self, value: Rc<ArrayD<f32>>, requires_grad: bool, backward: Option<BackwardStep>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: requires_grad && self.grad_enabled,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    /// Append an op node. `make_backward` is only invoked when some parent
    /// requires grad, so constant subgraphs cost nothing on the tape.
    pub(crate) fn op(
        &mut self,
        value: ArrayD<f32>,
        parents: &[Var],
        make_backward: impl FnOnce() -> BackwardFn,
    ) -> Var {
        let requires = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let backward = if requires {
            Some(BackwardStep {
                parents: parents.iter().map(|p| p.0).collect(),
                apply: make_backward(),
            })
        } else {
            None
        };
        self.push(Rc::new(value), requires, backward)
    }

    /// Reverse pass from a scalar loss. Consumes the tape's backward
    /// closures; a graph supports one backward per forward.
    pub fn backward(&mut self, loss: Var) -> Gradients {
        assert!(
            self.value(loss).len() == 1,
            "backward requires a scalar loss, got shape {:?}",
            self.shape(loss)
        );
        assert!(self.grad_enabled, "backward on a no-grad graph");
        let mut grads: Vec<Option<ArrayD<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::from_elem(IxDyn(self.shape(loss)), 1.0));
        for id in (0..=loss.0).rev() {
            if grads[id].is_none() {
                continue;
            }
            let Some(step) = self.nodes[id].backward.take() else {
                continue;
            };
            let g_out = grads[id].as_ref().expect("grad present");
            let contributions = (step.apply)(g_out);
            debug_assert_eq!(contributions.len(), step.parents.len());
            for (pid, contrib) in step.parents.iter().zip(contributions) {
                let Some(c) = contrib else { continue };
                if !self.nodes[*pid].requires_grad {
                    continue;
                }
                match &mut grads[*pid] {
                    Some(acc) => *acc += &c,
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Gradients { grads }
    }

    /// Scatter gradients of bound parameters back into their store,
    /// scaled (grad accumulation across batch items adds up in call order).
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore, scale: f32) {
        for (&(uid, pidx), &var) in self.bindings.iter() {
            if uid != store.uid {
                continue;
            }
            if let Some(g) = &grads.grads[var.0] {
                store.params[pidx].grad.scaled_add(scale, g);
            }
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

/// Gradients from one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f32>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&ArrayD<f32>> {
        self.grads[v.0].as_ref()
    }
}

// ---------------------------------------------------------------------------
// Parameter storage
// ---------------------------------------------------------------------------

/// Handle to a named tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

pub struct ParamEntry {
    pub name: String,
    pub value: Rc<ArrayD<f32>>,
    pub grad: ArrayD<f32>,
}

static STORE_UID: AtomicU64 = AtomicU64::new(1);

/// Named parameter tensors plus their gradient accumulators.
pub struct ParamStore {
    uid: u64,
    params: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            uid: STORE_UID.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<f32>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let grad = ArrayD::zeros(value.raw_dim());
        self.params.push(ParamEntry {
            name: name.clone(),
            value: Rc::new(value),
            grad,
        });
        let id = ParamId(self.params.len() - 1);
        self.by_name.insert(name, id.0);
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f32> {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &ArrayD<f32> {
        &self.params[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.params.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Mutate a parameter value in place. Panics if the value is still
    /// shared with a live graph; optimizers run between graphs.
    pub fn update(&mut self, id: ParamId, f: impl FnOnce(&mut ArrayD<f32>)) {
        let entry = &mut self.params[id.0];
        let value = Rc::get_mut(&mut entry.value)
            .expect("parameter value aliased by a live graph during update");
        f(value);
    }

    pub fn set_value(&mut self, id: ParamId, value: ArrayD<f32>) {
        assert_eq!(
            self.params[id.0].value.shape(),
            value.shape(),
            "set_value shape mismatch for {}",
            self.params[id.0].name
        );
        self.params[id.0].value = Rc::new(value);
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Global L2 norm over every parameter's gradient.
    pub fn grad_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for p in &self.params {
            for &g in p.grad.iter() {
                acc += (g as f64) * (g as f64);
            }
        }
        acc.sqrt()
    }

    /// Number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Order-stable checksum of all parameter values (name + bytes).
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for &x in p.value.iter() {
                h.update(x.to_le_bytes());
            }
        }
        let out = h.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        ParamStore::new()
    }
}

/// A store plus a trainability flag, threaded through model forwards.
pub struct Binder<'a> {
    pub store: &'a ParamStore,
    pub trainable: bool,
}

impl<'a> Binder<'a> {
    pub fn trainable(store: &'a ParamStore) -> Self {
        Binder { store, trainable: true }
    }

    pub fn frozen(store: &'a ParamStore) -> Self {
        Binder { store, trainable: false }
    }
}
