use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use smallvec::{smallvec, SmallVec};

use super::scalar;
use super::AutodiffError;

/// Stable identifier of a differentiable leaf.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

struct NodeData {
    value: f64,
    parents: SmallVec<[(usize, f64); 2]>,
    grad_blocked: bool,
}

#[derive(Debug, Clone, Copy)]
struct Fault {
    op: &'static str,
    node: usize,
}

/// Arena holding one computation graph.
///
/// A tape is `Send` but not `Sync`: build and differentiate each graph on a
/// single thread, and use one tape per thread for parallel work.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<NodeData>>,
    params: RefCell<Vec<(ParamId, usize)>>,
    stops: RefCell<Vec<f64>>,
    frozen: Option<Vec<f64>>,
    fault: Cell<Option<Fault>>,
    replay_overrun: Cell<bool>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.len())
            .field("params", &self.params.borrow().len())
            .field("stops", &self.stops.borrow().len())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose `k`-th [`stop_gradient`](Tape::stop_gradient) call
    /// yields `values[k]` regardless of its argument.
    pub fn with_frozen_stops(values: Vec<f64>) -> Self {
        Self {
            frozen: Some(values),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values that passed through `stop_gradient`, in call order.
    pub fn stopped_values(&self) -> Vec<f64> {
        self.stops.borrow().clone()
    }

    fn push(&self, op: &'static str, value: f64, parents: SmallVec<[(usize, f64); 2]>) -> Node<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len();
        if !value.is_finite() && self.fault.get().is_none() {
            self.fault.set(Some(Fault { op, node: idx }));
        }
        nodes.push(NodeData {
            value,
            parents,
            grad_blocked: false,
        });
        Node { tape: self, idx }
    }

    /// Register a differentiable leaf. Registering the same id twice makes
    /// both leaves contribute to that id's derivative.
    pub fn param(&self, id: ParamId, value: f64) -> Node<'_> {
        let node = self.push("param", value, SmallVec::new());
        self.params.borrow_mut().push((id, node.idx));
        node
    }

    pub fn constant(&self, value: f64) -> Node<'_> {
        self.push("constant", value, SmallVec::new())
    }

    /// `sg[x]`: same value, zero derivative.
    pub fn stop_gradient<'t>(&'t self, x: Node<'t>) -> Node<'t> {
        self.check_same(x);
        let k = self.stops.borrow().len();
        let value = match &self.frozen {
            None => x.value(),
            Some(frozen) => match frozen.get(k) {
                Some(&v) => v,
                None => {
                    self.replay_overrun.set(true);
                    x.value()
                }
            },
        };
        self.stops.borrow_mut().push(value);
        let node = self.push("stop_gradient", value, SmallVec::new());
        self.nodes.borrow_mut()[node.idx].grad_blocked = true;
        node
    }

    pub fn sum<'t>(&'t self, xs: &[Node<'t>]) -> Node<'t> {
        let value = xs.iter().fold(0.0, |acc, x| acc + x.value());
        let parents = xs
            .iter()
            .map(|x| {
                self.check_same(*x);
                (x.idx, 1.0)
            })
            .collect();
        self.push("sum", value, parents)
    }

    pub fn mean<'t>(&'t self, xs: &[Node<'t>]) -> Node<'t> {
        assert!(!xs.is_empty(), "mean of an empty slice");
        self.sum(xs) / xs.len() as f64
    }

    /// `ln Σ exp(x_i)` as a single node.
    pub fn log_sum_exp<'t>(&'t self, xs: &[Node<'t>]) -> Node<'t> {
        let values: Vec<f64> = xs.iter().map(|x| x.value()).collect();
        let lse = scalar::log_sum_exp(&values);
        let parents = xs
            .iter()
            .zip(&values)
            .map(|(x, &v)| {
                self.check_same(*x);
                (x.idx, (v - lse).exp())
            })
            .collect();
        self.push("log_sum_exp", lse, parents)
    }

    fn check_same(&self, x: Node<'_>) {
        assert!(std::ptr::eq(self, x.tape), "node belongs to a different tape");
    }
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Node<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl fmt::Debug for Node<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Node#{}({})", self.idx, self.value())
    }
}

impl<'t> Node<'t> {
    pub fn value(self) -> f64 {
        self.tape.nodes.borrow()[self.idx].value
    }

    pub fn index(self) -> usize {
        self.idx
    }

    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    pub fn is_grad_blocked(self) -> bool {
        self.tape.nodes.borrow()[self.idx].grad_blocked
    }

    fn unary(self, op: &'static str, value: f64, deriv: f64) -> Node<'t> {
        self.tape.push(op, value, smallvec![(self.idx, deriv)])
    }

    fn binary(self, other: Node<'t>, op: &'static str, value: f64, da: f64, db: f64) -> Node<'t> {
        self.tape.check_same(other);
        self.tape.push(op, value, smallvec![(self.idx, da), (other.idx, db)])
    }

    pub fn exp(self) -> Node<'t> {
        let v = self.value().exp();
        self.unary("exp", v, v)
    }

    pub fn ln(self) -> Node<'t> {
        let x = self.value();
        self.unary("ln", x.ln(), 1.0 / x)
    }

    pub fn sqrt(self) -> Node<'t> {
        let v = self.value().sqrt();
        self.unary("sqrt", v, 0.5 / v)
    }

    pub fn square(self) -> Node<'t> {
        let x = self.value();
        self.unary("square", x * x, 2.0 * x)
    }

    pub fn sigmoid(self) -> Node<'t> {
        let s = scalar::sigmoid(self.value());
        self.unary("sigmoid", s, s * (1.0 - s))
    }

    pub fn softplus(self) -> Node<'t> {
        let x = self.value();
        self.unary("softplus", scalar::softplus(x), scalar::sigmoid(x))
    }

    /// `ln σ(x)`, stable for large `|x|`; derivative `1 - σ(x)`.
    pub fn log_sigmoid(self) -> Node<'t> {
        let x = self.value();
        self.unary("log_sigmoid", scalar::log_sigmoid(x), scalar::sigmoid(-x))
    }

    /// `ln(1 - e^x)`, defined for `x < 0`.
    pub fn log1m_exp(self) -> Node<'t> {
        let x = self.value();
        self.unary("log1m_exp", scalar::log1m_exp(x), -1.0 / (-x).exp_m1())
    }

    pub fn backward(self) -> Result<GradientMap, AutodiffError> {
        backward(self)
    }
}

impl<'t> Add for Node<'t> {
    type Output = Node<'t>;
    fn add(self, rhs: Node<'t>) -> Node<'t> {
        self.binary(rhs, "add", self.value() + rhs.value(), 1.0, 1.0)
    }
}

impl<'t> Sub for Node<'t> {
    type Output = Node<'t>;
    fn sub(self, rhs: Node<'t>) -> Node<'t> {
        self.binary(rhs, "sub", self.value() - rhs.value(), 1.0, -1.0)
    }
}

impl<'t> Mul for Node<'t> {
    type Output = Node<'t>;
    fn mul(self, rhs: Node<'t>) -> Node<'t> {
        let (a, b) = (self.value(), rhs.value());
        self.binary(rhs, "mul", a * b, b, a)
    }
}

impl<'t> Div for Node<'t> {
    type Output = Node<'t>;
    fn div(self, rhs: Node<'t>) -> Node<'t> {
        let (a, b) = (self.value(), rhs.value());
        self.binary(rhs, "div", a / b, 1.0 / b, -a / (b * b))
    }
}

impl<'t> Neg for Node<'t> {
    type Output = Node<'t>;
    fn neg(self) -> Node<'t> {
        self.unary("neg", -self.value(), -1.0)
    }
}

impl<'t> Add<f64> for Node<'t> {
    type Output = Node<'t>;
    fn add(self, rhs: f64) -> Node<'t> {
        self.unary("add_const", self.value() + rhs, 1.0)
    }
}

impl<'t> Sub<f64> for Node<'t> {
    type Output = Node<'t>;
    fn sub(self, rhs: f64) -> Node<'t> {
        self.unary("sub_const", self.value() - rhs, 1.0)
    }
}

impl<'t> Mul<f64> for Node<'t> {
    type Output = Node<'t>;
    fn mul(self, rhs: f64) -> Node<'t> {
        self.unary("mul_const", self.value() * rhs, rhs)
    }
}

impl<'t> Div<f64> for Node<'t> {
    type Output = Node<'t>;
    fn div(self, rhs: f64) -> Node<'t> {
        self.unary("div_const", self.value() / rhs, 1.0 / rhs)
    }
}

impl<'t> Add<Node<'t>> for f64 {
    type Output = Node<'t>;
    fn add(self, rhs: Node<'t>) -> Node<'t> {
        rhs + self
    }
}

impl<'t> Sub<Node<'t>> for f64 {
    type Output = Node<'t>;
    fn sub(self, rhs: Node<'t>) -> Node<'t> {
        rhs.unary("rsub_const", self - rhs.value(), -1.0)
    }
}

impl<'t> Mul<Node<'t>> for f64 {
    type Output = Node<'t>;
    fn mul(self, rhs: Node<'t>) -> Node<'t> {
        rhs * self
    }
}

impl<'t> Div<Node<'t>> for f64 {
    type Output = Node<'t>;
    fn div(self, rhs: Node<'t>) -> Node<'t> {
        let b = rhs.value();
        rhs.unary("rdiv_const", self / b, -self / (b * b))
    }
}

/// Partial derivatives of one output with respect to registered leaves.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientMap {
    grads: BTreeMap<ParamId, f64>,
}

impl GradientMap {
    /// Derivative for `id`; exactly 0 for leaves the output does not reach
    /// and for ids never registered.
    pub fn get(&self, id: ParamId) -> f64 {
        self.grads.get(&id).copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, f64)> + '_ {
        self.grads.iter().map(|(&k, &v)| (k, v))
    }

    /// Dense vector over ids `0..n`; ids `>= n` are ignored.
    pub fn to_dense(&self, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        self.accumulate_into(&mut out, 1.0);
        out
    }

    /// `out[id] += scale * grad[id]` in id order.
    pub fn accumulate_into(&self, out: &mut [f64], scale: f64) {
        for (&ParamId(i), &g) in &self.grads {
            if let Some(slot) = out.get_mut(i) {
                *slot += scale * g;
            }
        }
    }
}

/// Reverse sweep from `output`.
pub fn backward(output: Node<'_>) -> Result<GradientMap, AutodiffError> {
    let tape = output.tape;
    if let Some(fault) = tape.fault.get() {
        return Err(AutodiffError::NonFinite {
            op: fault.op,
            node: fault.node,
        });
    }
    if tape.replay_overrun.get() {
        return Err(AutodiffError::Structure(
            "graph has more stop-gradient nodes than frozen values".into(),
        ));
    }
    let nodes = tape.nodes.borrow();
    let mut adjoint = vec![0.0; output.idx + 1];
    adjoint[output.idx] = 1.0;
    for i in (0..=output.idx).rev() {
        let a = adjoint[i];
        // Skipping zero adjoints also keeps 0 * inf out of subgraphs that
        // only feed a stop-gradient.
        if a == 0.0 {
            continue;
        }
        for &(p, d) in &nodes[i].parents {
            if p >= i {
                return Err(AutodiffError::Structure(format!(
                    "node {i} has non-topological parent {p}"
                )));
            }
            adjoint[p] += a * d;
        }
    }
    let mut grads = BTreeMap::new();
    for &(id, idx) in tape.params.borrow().iter() {
        let g = adjoint.get(idx).copied().unwrap_or(0.0);
        *grads.entry(id).or_insert(0.0) += g;
    }
    Ok(GradientMap { grads })
}
