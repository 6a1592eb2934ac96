//! Eager reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value is a rank-2 array; scalars are `1x1`. Operations are evaluated
//! immediately and recorded on a [`Tape`]. Because a node can only be built
//! from nodes that already exist, node ids are a topological order of the
//! graph and [`Tape::backward`] walks the reachable ids in descending order.
//!
//! Binary elementwise operations accept equal shapes or a `1x1` operand on
//! either side. Anything wider (row or column broadcasts) has to be spelled
//! out with [`Var::matmul`] against a constant.

use std::cell::RefCell;

use ndarray::{Array2, Zip};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Neg,
    Square,
    Abs,
    Sqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy)]
enum Rule {
    Leaf,
    Unary(UnaryOp, usize),
    Binary(BinaryOp, usize, usize),
    MatMul(usize, usize),
    Reduce(ReduceOp, usize),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    grad: Matrix,
    rule: Rule,
}

/// Recording of every value computed in one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (r, c) = self.shape();
        write!(f, "Var(#{}, {}x{})", self.id, r, c)
    }
}

/// A trainable array that outlives individual tapes.
///
/// `grad` accumulates across backward passes until [`zero_grad`] is called.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let grad = Matrix::zeros(value.raw_dim());
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

pub fn zero_grad<'a>(params: impl IntoIterator<Item = &'a mut Parameter>) {
    for p in params {
        p.grad.fill(0.0);
    }
}

fn is_scalar(m: &Matrix) -> bool {
    m.nrows() == 1 && m.ncols() == 1
}

fn fmt_shape(m: &Matrix) -> String {
    format!("{}x{}", m.nrows(), m.ncols())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise combination with scalar broadcasting on either side.
fn broadcast(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
    if a.dim() == b.dim() {
        let mut out = Matrix::zeros(a.raw_dim());
        Zip::from(&mut out)
            .and(a)
            .and(b)
            .for_each(|o, &x, &y| *o = f(x, y));
        Ok(out)
    } else if is_scalar(b) {
        let y = b[[0, 0]];
        Ok(a.mapv(|x| f(x, y)))
    } else if is_scalar(a) {
        let x = a[[0, 0]];
        Ok(b.mapv(|y| f(x, y)))
    } else {
        Err(Error::Shape(format!(
            "cannot broadcast {} with {}",
            fmt_shape(a),
            fmt_shape(b)
        )))
    }
}

/// Collapse an upstream gradient onto an operand that may have been broadcast.
fn unbroadcast(grad: Matrix, operand_shape: (usize, usize)) -> Matrix {
    if grad.dim() == operand_shape {
        grad
    } else {
        Matrix::from_elem((1, 1), grad.sum())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Matrix, rule: Rule) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let grad = Matrix::zeros(value.raw_dim());
        nodes.push(Node { value, grad, rule });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf node. Constants and parameters are both leaves; they differ
    /// only in whether anybody reads their gradient afterwards.
    pub fn leaf(&self, value: Matrix) -> Var<'_> {
        self.push(value, Rule::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(Matrix::from_elem((1, 1), value))
    }

    pub fn param(&self, p: &Parameter) -> Var<'_> {
        self.leaf(p.value.clone())
    }

    pub fn value(&self, v: Var<'_>) -> Matrix {
        self.nodes.borrow()[v.id].value.clone()
    }

    pub fn grad(&self, v: Var<'_>) -> Matrix {
        self.nodes.borrow()[v.id].grad.clone()
    }

    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad.fill(0.0);
        }
    }

    /// Accumulate `d output / d node` into the gradient slot of every node
    /// reachable from `output`.
    pub fn backward(&self, output: Var<'_>) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        let out = &nodes[output.id];
        if !is_scalar(&out.value) {
            return Err(Error::NonScalarOutput {
                rows: out.value.nrows(),
                cols: out.value.ncols(),
            });
        }

        let mut reachable = vec![false; output.id + 1];
        reachable[output.id] = true;
        for id in (0..=output.id).rev() {
            if !reachable[id] {
                continue;
            }
            match nodes[id].rule {
                Rule::Leaf => {}
                Rule::Unary(_, a) | Rule::Reduce(_, a) => reachable[a] = true,
                Rule::Binary(_, a, b) | Rule::MatMul(a, b) => {
                    reachable[a] = true;
                    reachable[b] = true;
                }
            }
        }

        let mut adjoint: Vec<Option<Matrix>> = vec![None; output.id + 1];
        adjoint[output.id] = Some(Matrix::from_elem((1, 1), 1.0));

        fn add_into(slot: &mut Option<Matrix>, g: Matrix) {
            match slot {
                Some(acc) => *acc += &g,
                None => *slot = Some(g),
            }
        }

        for id in (0..=output.id).rev() {
            if !reachable[id] {
                continue;
            }
            let Some(g) = adjoint[id].take() else {
                continue;
            };
            nodes[id].grad += &g;
            let node = &nodes[id];
            match node.rule {
                Rule::Leaf => {}
                Rule::Unary(op, a) => {
                    let x = &nodes[a].value;
                    let y = &node.value;
                    let mut ga = Matrix::zeros(x.raw_dim());
                    Zip::from(&mut ga)
                        .and(&g)
                        .and(x)
                        .and(y)
                        .for_each(|o, &g, &x, &y| {
                            *o = g * match op {
                                UnaryOp::Exp => y,
                                UnaryOp::Log => 1.0 / x,
                                UnaryOp::Tanh => 1.0 - y * y,
                                UnaryOp::Sigmoid => y * (1.0 - y),
                                UnaryOp::Neg => -1.0,
                                UnaryOp::Square => 2.0 * x,
                                UnaryOp::Abs => {
                                    if x > 0.0 {
                                        1.0
                                    } else if x < 0.0 {
                                        -1.0
                                    } else {
                                        0.0
                                    }
                                }
                                UnaryOp::Sqrt => 0.5 / y,
                            }
                        });
                    add_into(&mut adjoint[a], ga);
                }
                Rule::Binary(op, a, b) => {
                    let av = &nodes[a].value;
                    let bv = &nodes[b].value;
                    let (ga, gb) = match op {
                        BinaryOp::Add => (g.clone(), g),
                        BinaryOp::Sub => (g.clone(), -g),
                        BinaryOp::Mul => (
                            broadcast(&g, bv, |g, b| g * b)?,
                            broadcast(&g, av, |g, a| g * a)?,
                        ),
                        BinaryOp::Div => {
                            let ga = broadcast(&g, bv, |g, b| g / b)?;
                            let ratio = broadcast(av, bv, |a, b| a / (b * b))?;
                            let gb = broadcast(&g, &ratio, |g, r| -g * r)?;
                            (ga, gb)
                        }
                    };
                    let (ash, bsh) = (av.dim(), bv.dim());
                    add_into(&mut adjoint[a], unbroadcast(ga, ash));
                    add_into(&mut adjoint[b], unbroadcast(gb, bsh));
                }
                Rule::MatMul(a, b) => {
                    let ga = g.dot(&nodes[b].value.t());
                    let gb = nodes[a].value.t().dot(&g);
                    add_into(&mut adjoint[a], ga);
                    add_into(&mut adjoint[b], gb);
                }
                Rule::Reduce(op, a) => {
                    let x = &nodes[a].value;
                    let scale = match op {
                        ReduceOp::Sum => g[[0, 0]],
                        ReduceOp::Mean => g[[0, 0]] / x.len() as f64,
                    };
                    add_into(&mut adjoint[a], Matrix::from_elem(x.raw_dim(), scale));
                }
            }
        }
        Ok(())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Matrix {
        self.tape.value(*self)
    }

    /// Value of a `1x1` node.
    pub fn scalar_value(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value[[0, 0]]
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.dim()
    }

    pub fn grad(&self) -> Matrix {
        self.tape.grad(*self)
    }

    pub fn unary(self, op: UnaryOp) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            match op {
                UnaryOp::Log => {
                    if let Some(bad) = x.iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                        return Err(Error::Domain(format!("log of nonpositive value {bad}")));
                    }
                    x.mapv(f64::ln)
                }
                UnaryOp::Sqrt => {
                    if let Some(bad) = x.iter().find(|&&v| v < 0.0 || v.is_nan()) {
                        return Err(Error::Domain(format!("sqrt of negative value {bad}")));
                    }
                    x.mapv(f64::sqrt)
                }
                UnaryOp::Exp => x.mapv(f64::exp),
                UnaryOp::Tanh => x.mapv(f64::tanh),
                UnaryOp::Sigmoid => x.mapv(sigmoid),
                UnaryOp::Neg => x.mapv(|v| -v),
                UnaryOp::Square => x.mapv(|v| v * v),
                UnaryOp::Abs => x.mapv(f64::abs),
            }
        };
        Ok(self.tape.push(value, Rule::Unary(op, self.id)))
    }

    pub fn binary(self, op: BinaryOp, other: Var<'t>) -> Result<Var<'t>> {
        debug_assert!(std::ptr::eq(self.tape, other.tape));
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            match op {
                BinaryOp::Add => broadcast(a, b, |x, y| x + y)?,
                BinaryOp::Sub => broadcast(a, b, |x, y| x - y)?,
                BinaryOp::Mul => broadcast(a, b, |x, y| x * y)?,
                BinaryOp::Div => {
                    if b.iter().any(|&v| v == 0.0) {
                        return Err(Error::Domain("division by zero".into()));
                    }
                    broadcast(a, b, |x, y| x / y)?
                }
            }
        };
        Ok(self.tape.push(value, Rule::Binary(op, self.id, other.id)))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            if a.ncols() != b.nrows() {
                return Err(Error::Shape(format!(
                    "matmul of {} by {}",
                    fmt_shape(a),
                    fmt_shape(b)
                )));
            }
            a.dot(b)
        };
        Ok(self.tape.push(value, Rule::MatMul(self.id, other.id)))
    }

    pub fn reduce(self, op: ReduceOp) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            if x.is_empty() {
                return Err(Error::EmptyInput("reduction over an empty array"));
            }
            match op {
                ReduceOp::Sum => x.sum(),
                ReduceOp::Mean => x.sum() / x.len() as f64,
            }
        };
        Ok(self
            .tape
            .push(Matrix::from_elem((1, 1), value), Rule::Reduce(op, self.id)))
    }

    pub fn add(self, o: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryOp::Add, o)
    }
    pub fn sub(self, o: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryOp::Sub, o)
    }
    pub fn mul(self, o: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryOp::Mul, o)
    }
    pub fn div(self, o: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryOp::Div, o)
    }
    pub fn exp(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Exp)
    }
    pub fn ln(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Log)
    }
    pub fn tanh(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Tanh)
    }
    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Sigmoid)
    }
    pub fn neg(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Neg)
    }
    pub fn square(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Square)
    }
    pub fn abs(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Abs)
    }
    pub fn sqrt(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Sqrt)
    }
    pub fn sum(self) -> Result<Var<'t>> {
        self.reduce(ReduceOp::Sum)
    }
    pub fn mean(self) -> Result<Var<'t>> {
        self.reduce(ReduceOp::Mean)
    }

    /// `self * c` for a plain constant.
    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.mul(self.tape.scalar(c))
    }

    /// `self + c` for a plain constant.
    pub fn offset(self, c: f64) -> Result<Var<'t>> {
        self.add(self.tape.scalar(c))
    }
}
