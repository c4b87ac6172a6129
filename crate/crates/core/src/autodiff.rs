//! Tensor-level reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. A reverse
//! sweep either produces plain tensors ([`Tape::grad`]) or records the sweep
//! itself on the same tape ([`Tape::grad_graph`]), so gradients can be
//! differentiated again. The shooting right-hand side relies on the second
//! form: momenta evolve by `-dH/dq`, and training differentiates through
//! that.
//!
//! Tapes are cheap and meant to live for a single rollout plus its reverse
//! sweep.

use std::cell::{Ref, RefCell};
use std::fmt;
use std::ops;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Componentwise nonlinearity. `relu'(0)` is taken to be 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Tensor {
        match self {
            Activation::Relu => x.map(|v| if v > 0.0 { v } else { 0.0 }),
            Activation::Tanh => x.map(f64::tanh),
        }
    }

    pub fn derivative(self, x: &Tensor) -> Tensor {
        match self {
            Activation::Relu => relu_mask(x),
            Activation::Tanh => x.map(|v| {
                let t = v.tanh();
                1.0 - t * t
            }),
        }
    }
}

fn relu_mask(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softplus(v: f64) -> f64 {
    // log(1 + e^v) without overflow
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    /// `y + c * x`
    Axpy(usize, usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    AddRow(usize, usize),
    SumRows(usize, usize),
    BroadcastRows(usize),
    Sum(usize, Rc<[usize]>),
    Fill(usize),
    Dot(usize, usize),
    MulScalar(usize, usize),
    MulConst(usize, Rc<Tensor>),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
}

impl Op {
    fn parents(&self) -> [Option<usize>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            Add(a, b)
            | Sub(a, b)
            | Mul(a, b)
            | Axpy(a, b, _)
            | MatMul(a, b)
            | AddRow(a, b)
            | Dot(a, b)
            | MulScalar(a, b) => [Some(a), Some(b)],
            Scale(a, _)
            | AddScalar(a)
            | Transpose(a)
            | SumRows(a, _)
            | BroadcastRows(a)
            | Sum(a, _)
            | Fill(a)
            | MulConst(a, _)
            | Relu(a)
            | Tanh(a)
            | Sigmoid(a)
            | Softplus(a) => [Some(a), None],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Operation recorder. Confined to one thread; independent tapes may run
/// concurrently.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("len", &self.len())
            .field("recording", &self.recording)
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(1024)),
            recording: true,
        }
    }

    /// A tape that computes values but records no operations. Forward values
    /// are identical to a recording tape; gradients through it are zero.
    pub fn untaped() -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(1024)),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Registers an input (or constant) tensor.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        let id = self.push_raw(value, Op::Leaf);
        Var { tape: self, id }
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.var(Tensor::scalar(value))
    }

    fn push_raw(&self, value: Tensor, op: Op) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        nodes.len() - 1
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let op = if self.recording { op } else { Op::Leaf };
        Var {
            tape: self,
            id: self.push_raw(value, op),
        }
    }

    fn value_ref(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn check(&self, v: &Var<'_>) -> Result<()> {
        if std::ptr::eq(v.tape, self) {
            Ok(())
        } else {
            Err(Error::Provenance)
        }
    }

    /// Gradients of a scalar `output` with respect to each of `inputs`, as
    /// plain tensors. Inputs that do not influence the output get zeros.
    pub fn grad(&self, output: Var<'_>, inputs: &[Var<'_>]) -> Result<Vec<Tensor>> {
        self.check(&output)?;
        for v in inputs {
            self.check(v)?;
        }
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let sweep = TensorSweep { tape: self };
        sweep.run(output.id, &ids)
    }

    /// Like [`Tape::grad`], but the reverse sweep is recorded so the returned
    /// gradients are themselves differentiable.
    pub fn grad_graph<'t>(&'t self, output: Var<'t>, inputs: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        self.check(&output)?;
        for v in inputs {
            self.check(v)?;
        }
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let sweep = GraphSweep { tape: self };
        sweep.run(output.id, &ids)
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.tape.value_ref(self.id).shape())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_ref(self.id).clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.value_ref(self.id))
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    pub fn item(&self) -> f64 {
        self.with_value(Tensor::item)
    }

    fn unary(self, f: impl FnOnce(&Tensor) -> Tensor, op: Op) -> Var<'t> {
        let v = f(&self.tape.value_ref(self.id));
        self.tape.push(v, op)
    }

    fn binary(self, other: Var<'t>, f: impl FnOnce(&Tensor, &Tensor) -> Tensor, op: Op) -> Var<'t> {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
        let v = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value, &nodes[other.id].value)
        };
        self.tape.push(v, op)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, |a, b| a.add(b).expect("add"), Op::Add(self.id, o.id))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, |a, b| a.sub(b).expect("sub"), Op::Sub(self.id, o.id))
    }

    /// Elementwise product.
    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, |a, b| a.mul(b).expect("mul"), Op::Mul(self.id, o.id))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(|a| a.scale(c), Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(|a| a.map(|v| v + c), Op::AddScalar(self.id))
    }

    /// `self + c * x`
    pub fn axpy(self, c: f64, x: Var<'t>) -> Var<'t> {
        self.binary(x, |a, b| a.axpy(c, b).expect("axpy"), Op::Axpy(self.id, x.id, c))
    }

    pub fn matmul(self, o: Var<'t>) -> Var<'t> {
        self.try_matmul(o).expect("matmul")
    }

    pub fn try_matmul(self, o: Var<'t>) -> Result<Var<'t>> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].value.matmul(&nodes[o.id].value)?
        };
        Ok(self.tape.push(v, Op::MatMul(self.id, o.id)))
    }

    pub fn t(self) -> Var<'t> {
        self.unary(|a| a.transpose().expect("transpose"), Op::Transpose(self.id))
    }

    /// Adds vector `v` to every row.
    pub fn add_row(self, v: Var<'t>) -> Var<'t> {
        self.binary(v, |a, b| a.add_row(b).expect("add_row"), Op::AddRow(self.id, v.id))
    }

    /// Column sums.
    pub fn sum_rows(self) -> Var<'t> {
        let rows = self.with_value(Tensor::rows);
        self.unary(|a| a.sum_rows().expect("sum_rows"), Op::SumRows(self.id, rows))
    }

    pub fn broadcast_rows(self, n: usize) -> Var<'t> {
        self.unary(
            |a| a.broadcast_rows(n).expect("broadcast_rows"),
            Op::BroadcastRows(self.id),
        )
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(self) -> Var<'t> {
        let shape: Rc<[usize]> = self.shape().into();
        self.unary(|a| Tensor::scalar(a.sum()), Op::Sum(self.id, shape))
    }

    /// Expands a scalar into a tensor of `shape`.
    pub fn fill(self, shape: &[usize]) -> Var<'t> {
        self.unary(|a| Tensor::full(shape, a.item()), Op::Fill(self.id))
    }

    /// Full contraction `sum(self * o)`, as a scalar.
    pub fn dot(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, |a, b| Tensor::scalar(a.dot(b).expect("dot")), Op::Dot(self.id, o.id))
    }

    /// Multiplies by a scalar variable.
    pub fn mul_scalar(self, s: Var<'t>) -> Var<'t> {
        self.binary(s, |a, b| a.scale(b.item()), Op::MulScalar(self.id, s.id))
    }

    /// Elementwise product with a constant.
    pub fn mul_const(self, c: Tensor) -> Var<'t> {
        let c = Rc::new(c);
        let c2 = c.clone();
        self.unary(move |a| a.mul(&c2).expect("mul_const"), Op::MulConst(self.id, c))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|a| Activation::Relu.apply(a), Op::Relu(self.id))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(|a| a.map(f64::tanh), Op::Tanh(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(|a| a.map(sigmoid), Op::Sigmoid(self.id))
    }

    /// `log(1 + exp(x))`
    pub fn softplus(self) -> Var<'t> {
        self.unary(|a| a.map(softplus), Op::Softplus(self.id))
    }

    pub fn activation(self, kind: Activation) -> Var<'t> {
        match kind {
            Activation::Relu => self.relu(),
            Activation::Tanh => self.tanh(),
        }
    }

    pub fn sum_sq(self) -> Var<'t> {
        self.dot(self)
    }
}

impl<'t> ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, o: Var<'t>) -> Var<'t> {
        Var::add(self, o)
    }
}

impl<'t> ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, o: Var<'t>) -> Var<'t> {
        Var::sub(self, o)
    }
}

impl<'t> ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, o: Var<'t>) -> Var<'t> {
        Var::mul(self, o)
    }
}

impl<'t> ops::Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, c: f64) -> Var<'t> {
        self.scale(c)
    }
}

impl<'t> ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}

/// Cotangent arithmetic used by the reverse sweep. Implemented for plain
/// tensors (first-order sweep) and for taped variables (recorded sweep).
trait Cotangent: Clone {
    fn add(&self, o: &Self) -> Self;
    fn mul(&self, o: &Self) -> Self;
    fn scale(&self, c: f64) -> Self;
    fn add_scalar(&self, c: f64) -> Self;
    fn matmul(&self, o: &Self) -> Self;
    fn transpose(&self) -> Self;
    fn sum_rows(&self) -> Self;
    fn broadcast_rows(&self, n: usize) -> Self;
    fn sum(&self) -> Self;
    fn fill(&self, shape: &[usize]) -> Self;
    fn dot(&self, o: &Self) -> Self;
    fn mul_scalar(&self, s: &Self) -> Self;
    fn mul_const(&self, c: &Rc<Tensor>) -> Self;
    fn sigmoid(&self) -> Self;
}

impl Cotangent for Tensor {
    fn add(&self, o: &Self) -> Self {
        Tensor::add(self, o).expect("cotangent add")
    }
    fn mul(&self, o: &Self) -> Self {
        Tensor::mul(self, o).expect("cotangent mul")
    }
    fn scale(&self, c: f64) -> Self {
        Tensor::scale(self, c)
    }
    fn add_scalar(&self, c: f64) -> Self {
        self.map(|v| v + c)
    }
    fn matmul(&self, o: &Self) -> Self {
        Tensor::matmul(self, o).expect("cotangent matmul")
    }
    fn transpose(&self) -> Self {
        Tensor::transpose(self).expect("cotangent transpose")
    }
    fn sum_rows(&self) -> Self {
        Tensor::sum_rows(self).expect("cotangent sum_rows")
    }
    fn broadcast_rows(&self, n: usize) -> Self {
        Tensor::broadcast_rows(self, n).expect("cotangent broadcast_rows")
    }
    fn sum(&self) -> Self {
        Tensor::scalar(Tensor::sum(self))
    }
    fn fill(&self, shape: &[usize]) -> Self {
        Tensor::full(shape, self.item())
    }
    fn dot(&self, o: &Self) -> Self {
        Tensor::scalar(Tensor::dot(self, o).expect("cotangent dot"))
    }
    fn mul_scalar(&self, s: &Self) -> Self {
        Tensor::scale(self, s.item())
    }
    fn mul_const(&self, c: &Rc<Tensor>) -> Self {
        Tensor::mul(self, c).expect("cotangent mul_const")
    }
    fn sigmoid(&self) -> Self {
        self.map(sigmoid)
    }
}

impl Cotangent for Var<'_> {
    fn add(&self, o: &Self) -> Self {
        Var::add(*self, *o)
    }
    fn mul(&self, o: &Self) -> Self {
        Var::mul(*self, *o)
    }
    fn scale(&self, c: f64) -> Self {
        Var::scale(*self, c)
    }
    fn add_scalar(&self, c: f64) -> Self {
        Var::add_scalar(*self, c)
    }
    fn matmul(&self, o: &Self) -> Self {
        Var::matmul(*self, *o)
    }
    fn transpose(&self) -> Self {
        Var::t(*self)
    }
    fn sum_rows(&self) -> Self {
        Var::sum_rows(*self)
    }
    fn broadcast_rows(&self, n: usize) -> Self {
        Var::broadcast_rows(*self, n)
    }
    fn sum(&self) -> Self {
        Var::sum(*self)
    }
    fn fill(&self, shape: &[usize]) -> Self {
        Var::fill(*self, shape)
    }
    fn dot(&self, o: &Self) -> Self {
        Var::dot(*self, *o)
    }
    fn mul_scalar(&self, s: &Self) -> Self {
        Var::mul_scalar(*self, *s)
    }
    fn mul_const(&self, c: &Rc<Tensor>) -> Self {
        let v = self.with_value(|a| a.mul(c).expect("mul_const"));
        self.tape.push(v, Op::MulConst(self.id, c.clone()))
    }
    fn sigmoid(&self) -> Self {
        Var::sigmoid(*self)
    }
}

trait Sweep {
    type G: Cotangent;
    fn tape(&self) -> &Tape;
    /// Handle to the forward value of node `id`.
    fn handle(&self, id: usize) -> Self::G;
    fn seed(&self) -> Self::G;
    fn zeros(&self, shape: &[usize]) -> Self::G;

    fn run(&self, out: usize, wrt: &[usize]) -> Result<Vec<Self::G>> {
        let tape = self.tape();
        let out_shape = tape.value_ref(out).shape().to_vec();
        if out_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarOutput(out_shape));
        }
        let lo = wrt.iter().copied().min().unwrap_or(out).min(out);
        let span = out - lo + 1;

        // needed[i]: node lo+i depends on some requested input
        let mut needed = vec![false; span];
        let ops: Vec<Op> = {
            let nodes = tape.nodes.borrow();
            nodes[lo..=out].iter().map(|n| n.op.clone()).collect()
        };
        for &w in wrt {
            if w <= out {
                needed[w - lo] = true;
            }
        }
        for i in 0..span {
            if needed[i] {
                continue;
            }
            needed[i] = ops[i].parents().iter().flatten().any(|&p| p >= lo && needed[p - lo]);
        }

        let mut grads: Vec<Option<Self::G>> = vec![None; span];
        let mut found: Vec<Option<Self::G>> = vec![None; wrt.len()];
        if needed[span - 1] {
            grads[span - 1] = Some(self.seed());
        }
        for i in (0..span).rev() {
            let Some(g) = grads[i].take() else { continue };
            let id = lo + i;
            for (k, &w) in wrt.iter().enumerate() {
                if w == id {
                    found[k] = Some(g.clone());
                }
            }
            let need = |p: usize| p >= lo && needed[p - lo];
            for (p, contrib) in self.vjp(&ops[i], id, &g, &need) {
                let slot = &mut grads[p - lo];
                *slot = Some(match slot.take() {
                    Some(acc) => acc.add(&contrib),
                    None => contrib,
                });
            }
        }
        Ok(found
            .into_iter()
            .zip(wrt)
            .map(|(g, &w)| g.unwrap_or_else(|| self.zeros(tape.value_ref(w).shape())))
            .collect())
    }

    fn vjp(&self, op: &Op, out: usize, g: &Self::G, need: &dyn Fn(usize) -> bool) -> Vec<(usize, Self::G)> {
        use Op::*;
        let mut r = Vec::with_capacity(2);
        match *op {
            Leaf => {}
            Add(a, b) => {
                if need(a) {
                    r.push((a, g.clone()));
                }
                if need(b) {
                    r.push((b, g.clone()));
                }
            }
            Sub(a, b) => {
                if need(a) {
                    r.push((a, g.clone()));
                }
                if need(b) {
                    r.push((b, g.scale(-1.0)));
                }
            }
            Mul(a, b) => {
                if need(a) {
                    r.push((a, g.mul(&self.handle(b))));
                }
                if need(b) {
                    r.push((b, g.mul(&self.handle(a))));
                }
            }
            Scale(a, c) => {
                if need(a) {
                    r.push((a, g.scale(c)));
                }
            }
            AddScalar(a) => {
                if need(a) {
                    r.push((a, g.clone()));
                }
            }
            Axpy(y, x, c) => {
                if need(y) {
                    r.push((y, g.clone()));
                }
                if need(x) {
                    r.push((x, g.scale(c)));
                }
            }
            MatMul(a, b) => {
                if need(a) {
                    r.push((a, g.matmul(&self.handle(b).transpose())));
                }
                if need(b) {
                    r.push((b, self.handle(a).transpose().matmul(g)));
                }
            }
            Transpose(a) => {
                if need(a) {
                    r.push((a, g.transpose()));
                }
            }
            AddRow(m, v) => {
                if need(m) {
                    r.push((m, g.clone()));
                }
                if need(v) {
                    r.push((v, g.sum_rows()));
                }
            }
            SumRows(a, n) => {
                if need(a) {
                    r.push((a, g.broadcast_rows(n)));
                }
            }
            BroadcastRows(a) => {
                if need(a) {
                    r.push((a, g.sum_rows()));
                }
            }
            Sum(a, ref shape) => {
                if need(a) {
                    r.push((a, g.fill(shape)));
                }
            }
            Fill(a) => {
                if need(a) {
                    r.push((a, g.sum()));
                }
            }
            Dot(a, b) => {
                if need(a) {
                    r.push((a, self.handle(b).mul_scalar(g)));
                }
                if need(b) {
                    r.push((b, self.handle(a).mul_scalar(g)));
                }
            }
            MulScalar(a, s) => {
                if need(a) {
                    r.push((a, g.mul_scalar(&self.handle(s))));
                }
                if need(s) {
                    r.push((s, g.dot(&self.handle(a))));
                }
            }
            MulConst(a, ref c) => {
                if need(a) {
                    r.push((a, g.mul_const(c)));
                }
            }
            Relu(a) => {
                if need(a) {
                    let mask = Rc::new(relu_mask(&self.tape().value_ref(a)));
                    r.push((a, g.mul_const(&mask)));
                }
            }
            Tanh(a) => {
                if need(a) {
                    let y = self.handle(out);
                    r.push((a, g.mul(&y.mul(&y).scale(-1.0).add_scalar(1.0))));
                }
            }
            Sigmoid(a) => {
                if need(a) {
                    let s = self.handle(out);
                    r.push((a, g.mul(&s.mul(&s.scale(-1.0).add_scalar(1.0)))));
                }
            }
            Softplus(a) => {
                if need(a) {
                    r.push((a, g.mul(&self.handle(a).sigmoid())));
                }
            }
        }
        r
    }
}

struct TensorSweep<'a> {
    tape: &'a Tape,
}

impl Sweep for TensorSweep<'_> {
    type G = Tensor;
    fn tape(&self) -> &Tape {
        self.tape
    }
    fn handle(&self, id: usize) -> Tensor {
        self.tape.value_ref(id).clone()
    }
    fn seed(&self) -> Tensor {
        Tensor::scalar(1.0)
    }
    fn zeros(&self, shape: &[usize]) -> Tensor {
        Tensor::zeros(shape)
    }
}

struct GraphSweep<'t> {
    tape: &'t Tape,
}

impl<'t> Sweep for GraphSweep<'t> {
    type G = Var<'t>;
    fn tape(&self) -> &Tape {
        self.tape
    }
    fn handle(&self, id: usize) -> Var<'t> {
        Var { tape: self.tape, id }
    }
    fn seed(&self) -> Var<'t> {
        self.tape.scalar(1.0)
    }
    fn zeros(&self, shape: &[usize]) -> Var<'t> {
        self.tape.var(Tensor::zeros(shape))
    }
}
