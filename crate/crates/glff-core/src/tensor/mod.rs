//! Reverse-mode automatic differentiation over `ndarray` arrays.
//!
//! A [`Tape`] records one forward pass; [`Var`]s are handles to arrays that
//! may or may not be attached to a tape. Evaluation without gradients simply
//! runs the same operator code with no tape attached, so the training and
//! inference paths cannot diverge numerically.

use ndarray::{ArcArray, ArrayD, IxDyn};
use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::RwLock;

pub mod backend;
pub mod gradcheck;
pub mod ops;

pub use backend::{matmul, matmul_into, Elem};

/// Backward closure: receives the node's output gradient and accumulates
/// gradients into its parents through the sink.
type BackFn<F> = Box<dyn FnOnce(&ArrayD<F>, &mut GradSink<F>)>;

struct Node<F: Elem> {
    back: Option<BackFn<F>>,
}

struct TapeInner<F: Elem> {
    nodes: Vec<Node<F>>,
    /// Leaf nodes bound to named parameters, for gradient extraction.
    param_nodes: Vec<(ParamId, usize)>,
}

/// Gradient accumulator indexed by tape node id.
pub struct GradSink<F: Elem> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Elem> GradSink<F> {
    pub fn add(&mut self, node: usize, grad: ArrayD<F>) {
        match &mut self.grads[node] {
            Some(g) => *g += &grad,
            slot @ None => *slot = Some(grad),
        }
    }
}

/// Records operations of one forward pass for reverse-mode differentiation.
pub struct Tape<F: Elem> {
    inner: Rc<RefCell<TapeInner<F>>>,
}

impl<F: Elem> Clone for Tape<F> {
    fn clone(&self) -> Self {
        Tape {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<F: Elem> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Elem> Tape<F> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                param_nodes: Vec::new(),
            })),
        }
    }

    fn push(&self, back: BackFn<F>) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { back: Some(back) });
        inner.nodes.len() - 1
    }

    fn push_leaf(&self) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { back: None });
        inner.nodes.len() - 1
    }

    /// Creates a leaf variable whose gradient survives backward.
    pub fn leaf(&self, data: ArrayD<F>) -> Var<F> {
        let id = self.push_leaf();
        Var {
            data: data.into_shared(),
            node: Some((self.clone(), id)),
        }
    }

    fn same_tape(&self, other: &Tape<F>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

/// A tensor plus an optional position on a tape.
pub struct Var<F: Elem> {
    pub data: ArcArray<F, IxDyn>,
    node: Option<(Tape<F>, usize)>,
}

impl<F: Elem> Clone for Var<F> {
    fn clone(&self) -> Self {
        Var {
            data: self.data.clone(),
            node: self.node.as_ref().map(|(t, i)| (t.clone(), *i)),
        }
    }
}

impl<F: Elem> Var<F> {
    /// A constant (untracked) variable.
    pub fn constant(data: ArrayD<F>) -> Self {
        Var {
            data: data.into_shared(),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    pub fn node_id(&self) -> Option<usize> {
        self.node.as_ref().map(|(_, i)| *i)
    }

    fn tape(&self) -> Option<&Tape<F>> {
        self.node.as_ref().map(|(t, _)| t)
    }

    /// The tape shared by any tracked input, checking consistency.
    fn joint_tape(inputs: &[&Var<F>]) -> Option<Tape<F>> {
        let mut found: Option<&Tape<F>> = None;
        for v in inputs {
            if let Some(t) = v.tape() {
                match found {
                    None => found = Some(t),
                    Some(prev) => assert!(prev.same_tape(t), "variables from different tapes"),
                }
            }
        }
        found.cloned()
    }

    /// Scalar value of a 0-d or single-element tensor.
    pub fn scalar(&self) -> F {
        debug_assert_eq!(self.data.len(), 1);
        *self.data.iter().next().unwrap()
    }

    /// Detached copy: same values, no tape.
    pub fn detach(&self) -> Var<F> {
        Var {
            data: self.data.clone(),
            node: None,
        }
    }
}

/// Gradients of a scalar loss with respect to tape leaves.
pub struct Gradients<F: Elem> {
    by_param: HashMap<ParamId, ArrayD<F>>,
    by_node: HashMap<usize, ArrayD<F>>,
}

impl<F: Elem> Gradients<F> {
    pub fn for_param(&self, id: ParamId) -> Option<&ArrayD<F>> {
        self.by_param.get(&id)
    }

    pub fn for_node(&self, node: usize) -> Option<&ArrayD<F>> {
        self.by_node.get(&node)
    }
}

/// Runs reverse-mode accumulation from a scalar loss.
pub fn backward<F: Elem>(loss: &Var<F>) -> Gradients<F> {
    let (tape, loss_id) = loss
        .node
        .as_ref()
        .map(|(t, i)| (t.clone(), *i))
        .expect("backward on an untracked variable");
    assert_eq!(loss.data.len(), 1, "backward expects a scalar loss");

    let mut inner = tape.inner.borrow_mut();
    let n = inner.nodes.len();
    let mut sink = GradSink {
        grads: (0..n).map(|_| None).collect(),
    };
    sink.add(loss_id, ArrayD::ones(loss.data.raw_dim()));

    for id in (0..=loss_id).rev() {
        if sink.grads[id].is_none() {
            continue;
        }
        if let Some(back) = inner.nodes[id].back.take() {
            let g = sink.grads[id].take().unwrap();
            back(&g, &mut sink);
        }
    }

    let mut by_param = HashMap::new();
    for (pid, node) in &inner.param_nodes {
        if let Some(g) = &sink.grads[*node] {
            by_param
                .entry(*pid)
                .and_modify(|acc: &mut ArrayD<F>| *acc += g)
                .or_insert_with(|| g.clone());
        }
    }
    let by_node = sink
        .grads
        .into_iter()
        .enumerate()
        .filter_map(|(i, g)| g.map(|g| (i, g)))
        .collect();
    Gradients { by_param, by_node }
}

/// Handle to a named parameter in a [`Params`] store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Handle to a non-trainable state buffer (batch-norm running statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(pub usize);

pub struct ParamEntry<F: Elem> {
    pub name: String,
    /// Shared copy-on-write storage: forward passes clone handles, not data.
    pub value: ArcArray<F, IxDyn>,
}

/// Named parameter and buffer storage for a model.
///
/// Parameters are plain arrays (single-writer updates between forward
/// passes); buffers sit behind `RwLock` because evaluation reads them while
/// training forward passes write them.
pub struct Params<F: Elem> {
    entries: Vec<ParamEntry<F>>,
    buffers: Vec<(String, RwLock<ArrayD<F>>)>,
}

impl<F: Elem> Default for Params<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Elem> Params<F> {
    pub fn new() -> Self {
        Params {
            entries: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<F>) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value: value.into_shared(),
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: ArrayD<F>) -> BufferId {
        self.buffers.push((name.into(), RwLock::new(value)));
        BufferId(self.buffers.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ArcArray<F, IxDyn> {
        &self.entries[id.0].value
    }

    /// Mutable access; copy-on-write if any forward pass still shares the
    /// storage.
    pub fn get_mut(&mut self, id: ParamId) -> &mut ArcArray<F, IxDyn> {
        &mut self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: ArrayD<F>) {
        self.entries[id.0].value = value.into_shared();
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<F>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn read_buffer(&self, id: BufferId) -> ArrayD<F> {
        self.buffers[id.0].1.read().unwrap().clone()
    }

    pub fn write_buffer(&self, id: BufferId, value: ArrayD<F>) {
        *self.buffers[id.0].1.write().unwrap() = value;
    }

    pub fn buffer_name(&self, id: BufferId) -> &str {
        &self.buffers[id.0].0
    }

    pub fn buffers(&self) -> impl Iterator<Item = (BufferId, &str)> {
        self.buffers
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (BufferId(i), n.as_str()))
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Per-forward context: parameter store, optional tape, train/eval switch.
pub struct Ctx<'a, F: Elem> {
    pub params: &'a Params<F>,
    pub tape: Option<Tape<F>>,
    pub training: bool,
    /// Bind parameters to the tape so their gradients are collected. Off for
    /// input-gradient passes (adversarial attacks differentiate the image,
    /// not the weights).
    pub track_params: bool,
    bound: RefCell<HashMap<ParamId, usize>>,
}

impl<'a, F: Elem> Ctx<'a, F> {
    pub fn eval(params: &'a Params<F>) -> Self {
        Ctx {
            params,
            tape: None,
            training: false,
            track_params: false,
            bound: RefCell::new(HashMap::new()),
        }
    }

    pub fn train(params: &'a Params<F>, tape: Tape<F>) -> Self {
        Ctx {
            params,
            tape: Some(tape),
            training: true,
            track_params: true,
            bound: RefCell::new(HashMap::new()),
        }
    }

    /// Evaluation-mode context that differentiates with respect to inputs
    /// only (weights stay constant).
    pub fn input_grad(params: &'a Params<F>, tape: Tape<F>) -> Self {
        Ctx {
            params,
            tape: Some(tape),
            training: false,
            track_params: false,
            bound: RefCell::new(HashMap::new()),
        }
    }

    /// Parameter as a variable. With tracking on, the same parameter binds to
    /// one tape node no matter how many times it is used, so gradients from
    /// shared modules (the backbone serves both branches) accumulate.
    pub fn p(&self, id: ParamId) -> Var<F> {
        let data = self.params.get(id).clone();
        match (&self.tape, self.track_params) {
            (Some(tape), true) => {
                let mut bound = self.bound.borrow_mut();
                let node = *bound.entry(id).or_insert_with(|| {
                    let n = tape.push_leaf();
                    tape.inner.borrow_mut().param_nodes.push((id, n));
                    n
                });
                Var {
                    data,
                    node: Some((tape.clone(), node)),
                }
            }
            _ => Var { data, node: None },
        }
    }

    pub fn leaf(&self, data: ArrayD<F>) -> Var<F> {
        match &self.tape {
            Some(tape) => tape.leaf(data),
            None => Var::constant(data),
        }
    }
}
