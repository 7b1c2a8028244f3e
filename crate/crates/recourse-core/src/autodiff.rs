//! Tape-based reverse-mode automatic differentiation over dense arrays.
//!
//! The tape records primitive operations eagerly: pushing an op computes its
//! value immediately, so the node list is always topologically ordered and a
//! single reverse sweep yields exact adjoints for every leaf. Inputs (leaves
//! and constants) can be overwritten with [`Tape::set_input`] and the whole
//! graph recomputed in place with [`Tape::replay`], which is what the
//! iterative solvers use to avoid rebuilding graphs inside hot loops.
//!
//! Tapes are plain owned data: immutable between passes and safe to move
//! across threads. Parallel workloads use one tape per work item.

use crate::num::{real, Real};
use thiserror::Error;

/// Hard cap on the input dimension accepted by [`input_gradient_stencil`].
pub const MAX_STENCIL_DIM: usize = 64;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op} at node {node}: {detail}")]
    ShapeMismatch {
        op: &'static str,
        node: usize,
        detail: String,
    },
    #[error("gradient root must be a scalar, node {node} has shape {shape:?}")]
    RootNotScalar { node: usize, shape: Shape },
    #[error("node {node} is not an input (leaf or constant)")]
    NotAnInput { node: usize },
    #[error("input data length {got} does not match node {node} size {expected}")]
    InputSize {
        node: usize,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("stencil dimension {dim} exceeds limit {limit}")]
    StencilTooWide { dim: usize, limit: usize },
    #[error("stencil step must be positive, got {step}")]
    BadStencilStep { step: f64 },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Shape of a tape value: rank 0, 1 or 2. Matrices are row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Scalar,
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Scalar => 1,
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A dense value together with its shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Value<R> {
    pub shape: Shape,
    pub data: Vec<R>,
}

impl<R: Real> Value<R> {
    pub fn scalar(x: R) -> Self {
        Value {
            shape: Shape::Scalar,
            data: vec![x],
        }
    }

    pub fn vector(data: Vec<R>) -> Self {
        Value {
            shape: Shape::Vector(data.len()),
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<R>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Value {
            shape: Shape::Matrix(rows, cols),
            data,
        }
    }

    pub fn as_scalar(&self) -> R {
        debug_assert_eq!(self.shape, Shape::Scalar);
        self.data[0]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op<R> {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, R),
    MatVec(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Dot(NodeId, NodeId),
    Sum(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Log(NodeId),
    Abs(NodeId),
    Square(NodeId),
    Sin(NodeId),
    Norm(NodeId, u8),
    Stack(Vec<NodeId>),
    Index(NodeId, usize),
}

#[derive(Debug, Clone)]
struct Node<R> {
    op: Op<R>,
    value: Value<R>,
}

/// Recorded computation graph. See the module docs.
#[derive(Debug, Clone, Default)]
pub struct Tape<R: Real> {
    nodes: Vec<Node<R>>,
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Value<R> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> R {
        self.nodes[id.0].value.as_scalar()
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].value.shape
    }

    fn push(&mut self, op: Op<R>, value: Value<R>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    fn mismatch(&self, op: &'static str, detail: String) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            op,
            node: self.nodes.len(),
            detail,
        }
    }

    // ---- inputs ----

    /// Differentiable input.
    pub fn leaf(&mut self, value: Value<R>) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn leaf_scalar(&mut self, x: R) -> NodeId {
        self.leaf(Value::scalar(x))
    }

    pub fn leaf_vector(&mut self, data: &[R]) -> NodeId {
        self.leaf(Value::vector(data.to_vec()))
    }

    /// Non-differentiable input (adjoint is discarded).
    pub fn constant(&mut self, value: Value<R>) -> NodeId {
        self.push(Op::Constant, value)
    }

    pub fn constant_scalar(&mut self, x: R) -> NodeId {
        self.constant(Value::scalar(x))
    }

    pub fn constant_vector(&mut self, data: &[R]) -> NodeId {
        self.constant(Value::vector(data.to_vec()))
    }

    /// Overwrite the data of a leaf or constant; call [`Tape::replay`] after.
    pub fn set_input(&mut self, id: NodeId, data: &[R]) -> Result<()> {
        let node = &mut self.nodes[id.0];
        match node.op {
            Op::Leaf | Op::Constant => {
                if data.len() != node.value.data.len() {
                    return Err(AutodiffError::InputSize {
                        node: id.0,
                        expected: node.value.data.len(),
                        got: data.len(),
                    });
                }
                node.value.data.copy_from_slice(data);
                Ok(())
            }
            _ => Err(AutodiffError::NotAnInput { node: id.0 }),
        }
    }

    // ---- binary elementwise ----

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Shape> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(self.mismatch(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("add", a, b)?;
        let data = self.zip(a, b, |x, y| x + y);
        Ok(self.push(Op::Add(a, b), Value { shape, data }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("sub", a, b)?;
        let data = self.zip(a, b, |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), Value { shape, data }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("mul", a, b)?;
        let data = self.zip(a, b, |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), Value { shape, data }))
    }

    fn zip(&self, a: NodeId, b: NodeId, f: impl Fn(R, R) -> R) -> Vec<R> {
        self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    /// Multiply by a compile-time-constant scalar.
    pub fn scale(&mut self, a: NodeId, c: R) -> NodeId {
        let shape = self.shape(a);
        let data = self.nodes[a.0].value.data.iter().map(|&x| x * c).collect();
        self.push(Op::Scale(a, c), Value { shape, data })
    }

    // ---- linear algebra ----

    pub fn matvec(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let (rows, cols) = match self.shape(m) {
            Shape::Matrix(r, c) => (r, c),
            s => return Err(self.mismatch("matvec", format!("lhs not a matrix: {s:?}"))),
        };
        let n = match self.shape(v) {
            Shape::Vector(n) => n,
            s => return Err(self.mismatch("matvec", format!("rhs not a vector: {s:?}"))),
        };
        if cols != n {
            return Err(self.mismatch("matvec", format!("{rows}x{cols} * vector of {n}")));
        }
        let md = &self.nodes[m.0].value.data;
        let vd = &self.nodes[v.0].value.data;
        let mut out = vec![R::zero(); rows];
        for (r, o) in out.iter_mut().enumerate() {
            let row = &md[r * cols..(r + 1) * cols];
            *o = crate::num::dot(row, vd);
        }
        Ok(self.push(
            Op::MatVec(m, v),
            Value {
                shape: Shape::Vector(rows),
                data: out,
            },
        ))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = match self.shape(a) {
            Shape::Matrix(r, c) => (r, c),
            s => return Err(self.mismatch("matmul", format!("lhs not a matrix: {s:?}"))),
        };
        let (br, bc) = match self.shape(b) {
            Shape::Matrix(r, c) => (r, c),
            s => return Err(self.mismatch("matmul", format!("rhs not a matrix: {s:?}"))),
        };
        if ac != br {
            return Err(self.mismatch("matmul", format!("{ar}x{ac} * {br}x{bc}")));
        }
        let ad = &self.nodes[a.0].value.data;
        let bd = &self.nodes[b.0].value.data;
        let mut out = vec![R::zero(); ar * bc];
        for i in 0..ar {
            for k in 0..ac {
                let aik = ad[i * ac + k];
                for j in 0..bc {
                    out[i * bc + j] += aik * bd[k * bc + j];
                }
            }
        }
        Ok(self.push(
            Op::MatMul(a, b),
            Value {
                shape: Shape::Matrix(ar, bc),
                data: out,
            },
        ))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        match self.same_shape("dot", a, b)? {
            Shape::Vector(_) => {}
            s => return Err(self.mismatch("dot", format!("operands not vectors: {s:?}"))),
        }
        let x = crate::num::dot(&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
        Ok(self.push(Op::Dot(a, b), Value::scalar(x)))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let x = self.nodes[a.0].value.data.iter().copied().sum();
        self.push(Op::Sum(a), Value::scalar(x))
    }

    /// p-norm of a vector for p in {1, 2}.
    pub fn norm(&mut self, a: NodeId, p: u8) -> Result<NodeId> {
        match self.shape(a) {
            Shape::Vector(_) => {}
            s => return Err(self.mismatch("norm", format!("operand not a vector: {s:?}"))),
        }
        let d = &self.nodes[a.0].value.data;
        let x = match p {
            1 => crate::num::norm1(d),
            2 => crate::num::norm2(d),
            _ => return Err(self.mismatch("norm", format!("unsupported p = {p}"))),
        };
        Ok(self.push(Op::Norm(a, p), Value::scalar(x)))
    }

    // ---- elementwise nonlinearities ----

    fn map(&mut self, a: NodeId, op: Op<R>, f: impl Fn(R) -> R) -> NodeId {
        let shape = self.shape(a);
        let data = self.nodes[a.0].value.data.iter().map(|&x| f(x)).collect();
        self.push(op, Value { shape, data })
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Relu(a), |x| x.max(R::zero()))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Log(a), |x| x.ln())
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Abs(a), |x| x.abs())
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Square(a), |x| x * x)
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Sin(a), |x| x.sin())
    }

    // ---- structural ----

    /// Stack scalar nodes into a vector.
    pub fn stack(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mut data = Vec::with_capacity(parts.len());
        for &p in parts {
            match self.shape(p) {
                Shape::Scalar => data.push(self.nodes[p.0].value.data[0]),
                s => {
                    return Err(self.mismatch("stack", format!("part {} not scalar: {s:?}", p.0)))
                }
            }
        }
        let n = parts.len();
        Ok(self.push(
            Op::Stack(parts.to_vec()),
            Value {
                shape: Shape::Vector(n),
                data,
            },
        ))
    }

    /// Extract one coordinate of a vector as a scalar node.
    pub fn index(&mut self, v: NodeId, i: usize) -> Result<NodeId> {
        match self.shape(v) {
            Shape::Vector(n) if i < n => {}
            s => return Err(self.mismatch("index", format!("index {i} into {s:?}"))),
        }
        let x = self.nodes[v.0].value.data[i];
        Ok(self.push(Op::Index(v, i), Value::scalar(x)))
    }

    // ---- evaluation ----

    /// Recompute every node value in topological order. Used after
    /// [`Tape::set_input`]; repeated replays of the same inputs are
    /// bit-identical.
    pub fn replay(&mut self) {
        for i in 0..self.nodes.len() {
            let (done, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            let get = |id: NodeId| -> &Value<R> { &done[id.0].value };
            match node.op {
                Op::Leaf | Op::Constant => {}
                Op::Add(a, b) => {
                    for ((o, &x), &y) in node
                        .value
                        .data
                        .iter_mut()
                        .zip(&get(a).data)
                        .zip(&get(b).data)
                    {
                        *o = x + y;
                    }
                }
                Op::Sub(a, b) => {
                    for ((o, &x), &y) in node
                        .value
                        .data
                        .iter_mut()
                        .zip(&get(a).data)
                        .zip(&get(b).data)
                    {
                        *o = x - y;
                    }
                }
                Op::Mul(a, b) => {
                    for ((o, &x), &y) in node
                        .value
                        .data
                        .iter_mut()
                        .zip(&get(a).data)
                        .zip(&get(b).data)
                    {
                        *o = x * y;
                    }
                }
                Op::Scale(a, c) => {
                    for (o, &x) in node.value.data.iter_mut().zip(&get(a).data) {
                        *o = x * c;
                    }
                }
                Op::MatVec(m, v) => {
                    let cols = get(v).data.len();
                    let md = &get(m).data;
                    let vd = &get(v).data;
                    for (r, o) in node.value.data.iter_mut().enumerate() {
                        *o = crate::num::dot(&md[r * cols..(r + 1) * cols], vd);
                    }
                }
                Op::MatMul(a, b) => {
                    let (ar, ac) = match get(a).shape {
                        Shape::Matrix(r, c) => (r, c),
                        _ => unreachable!(),
                    };
                    let bc = match get(b).shape {
                        Shape::Matrix(_, c) => c,
                        _ => unreachable!(),
                    };
                    let (ad, bd) = (&get(a).data, &get(b).data);
                    node.value.data.iter_mut().for_each(|o| *o = R::zero());
                    for i in 0..ar {
                        for k in 0..ac {
                            let aik = ad[i * ac + k];
                            for j in 0..bc {
                                node.value.data[i * bc + j] += aik * bd[k * bc + j];
                            }
                        }
                    }
                }
                Op::Dot(a, b) => {
                    node.value.data[0] = crate::num::dot(&get(a).data, &get(b).data);
                }
                Op::Sum(a) => {
                    node.value.data[0] = get(a).data.iter().copied().sum();
                }
                Op::Norm(a, p) => {
                    node.value.data[0] = match p {
                        1 => crate::num::norm1(&get(a).data),
                        _ => crate::num::norm2(&get(a).data),
                    };
                }
                Op::Tanh(a) => {
                    for (o, &x) in node.value.data.iter_mut().zip(&get(a).data) {
                        *o = x.tanh();
                    }
                }
                Op::Relu(a) => {
                    for (o, &x) in node.value.data.iter_mut().zip(&get(a).data) {
                        *o = x.max(R::zero());
                    }
                }
                Op::Sigmoid(a) => {
                    for (o, &x) in node.value.data.iter_mut().zip(&get(a).data) {
                        *o = sigmoid(x);
                    }
                }
                Op::Log(a) => {
                    for (o, &x) in node.value.data.iter_mut().zip(&get(a).data) {
                        *o = x.ln();
                    }
                }
                Op::Abs(a) => {
                    for (o, &x) in node.value.data.iter_mut().zip(&get(a).data) {
                        *o = x.abs();
                    }
                }
                Op::Square(a) => {
                    for (o, &x) in node.value.data.iter_mut().zip(&get(a).data) {
                        *o = x * x;
                    }
                }
                Op::Sin(a) => {
                    for (o, &x) in node.value.data.iter_mut().zip(&get(a).data) {
                        *o = x.sin();
                    }
                }
                Op::Stack(ref parts) => {
                    for (o, &p) in node.value.data.iter_mut().zip(parts.iter()) {
                        *o = done[p.0].value.data[0];
                    }
                }
                Op::Index(v, i) => {
                    node.value.data[0] = get(v).data[i];
                }
            }
        }
    }

    // ---- differentiation ----

    /// Reverse sweep from a scalar root. Returns the adjoint of each
    /// requested leaf; node values are left untouched.
    pub fn gradient(&self, root: NodeId, leaves: &[NodeId]) -> Result<Vec<Value<R>>> {
        if self.shape(root) != Shape::Scalar {
            return Err(AutodiffError::RootNotScalar {
                node: root.0,
                shape: self.shape(root),
            });
        }
        let mut adjoints: Vec<Vec<R>> = self
            .nodes
            .iter()
            .map(|n| vec![R::zero(); n.value.data.len()])
            .collect();
        adjoints[root.0][0] = R::one();

        for i in (0..=root.0).rev() {
            let g = std::mem::take(&mut adjoints[i]);
            if g.iter().all(|&x| x == R::zero()) {
                adjoints[i] = g;
                continue;
            }
            let node = &self.nodes[i];
            match node.op {
                Op::Leaf | Op::Constant => {}
                Op::Add(a, b) => {
                    accumulate(&mut adjoints[a.0], &g, |y, gi, _| y + gi);
                    accumulate(&mut adjoints[b.0], &g, |y, gi, _| y + gi);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adjoints[a.0], &g, |y, gi, _| y + gi);
                    accumulate(&mut adjoints[b.0], &g, |y, gi, _| y - gi);
                }
                Op::Mul(a, b) => {
                    let bd = self.nodes[b.0].value.data.clone();
                    let ad = self.nodes[a.0].value.data.clone();
                    for (k, &gi) in g.iter().enumerate() {
                        adjoints[a.0][k] += gi * bd[k];
                        adjoints[b.0][k] += gi * ad[k];
                    }
                }
                Op::Scale(a, c) => {
                    accumulate(&mut adjoints[a.0], &g, |y, gi, _| y + gi * c);
                }
                Op::MatVec(m, v) => {
                    let cols = self.nodes[v.0].value.data.len();
                    let md = &self.nodes[m.0].value.data;
                    let vd = &self.nodes[v.0].value.data;
                    for (r, &gr) in g.iter().enumerate() {
                        for c in 0..cols {
                            adjoints[m.0][r * cols + c] += gr * vd[c];
                            adjoints[v.0][c] += gr * md[r * cols + c];
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (ar, ac) = match self.shape(a) {
                        Shape::Matrix(r, c) => (r, c),
                        _ => unreachable!(),
                    };
                    let bc = match self.shape(b) {
                        Shape::Matrix(_, c) => c,
                        _ => unreachable!(),
                    };
                    let ad = &self.nodes[a.0].value.data;
                    let bd = &self.nodes[b.0].value.data;
                    for i2 in 0..ar {
                        for j in 0..bc {
                            let gij = g[i2 * bc + j];
                            if gij == R::zero() {
                                continue;
                            }
                            for k in 0..ac {
                                adjoints[a.0][i2 * ac + k] += gij * bd[k * bc + j];
                                adjoints[b.0][k * bc + j] += gij * ad[i2 * ac + k];
                            }
                        }
                    }
                }
                Op::Dot(a, b) => {
                    let g0 = g[0];
                    let bd = self.nodes[b.0].value.data.clone();
                    let ad = self.nodes[a.0].value.data.clone();
                    for k in 0..ad.len() {
                        adjoints[a.0][k] += g0 * bd[k];
                        adjoints[b.0][k] += g0 * ad[k];
                    }
                }
                Op::Sum(a) => {
                    let g0 = g[0];
                    for y in adjoints[a.0].iter_mut() {
                        *y += g0;
                    }
                }
                Op::Norm(a, p) => {
                    let g0 = g[0];
                    let ad = &self.nodes[a.0].value.data;
                    match p {
                        1 => {
                            for (k, &x) in ad.iter().enumerate() {
                                adjoints[a.0][k] += g0 * sign(x);
                            }
                        }
                        _ => {
                            let n = node.value.data[0];
                            if n > R::zero() {
                                for (k, &x) in ad.iter().enumerate() {
                                    adjoints[a.0][k] += g0 * x / n;
                                }
                            }
                        }
                    }
                }
                Op::Tanh(a) => {
                    let yd = &node.value.data;
                    for (k, &gi) in g.iter().enumerate() {
                        adjoints[a.0][k] += gi * (R::one() - yd[k] * yd[k]);
                    }
                }
                Op::Relu(a) => {
                    let xd = &self.nodes[a.0].value.data;
                    for (k, &gi) in g.iter().enumerate() {
                        if xd[k] > R::zero() {
                            adjoints[a.0][k] += gi;
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let yd = &node.value.data;
                    for (k, &gi) in g.iter().enumerate() {
                        adjoints[a.0][k] += gi * yd[k] * (R::one() - yd[k]);
                    }
                }
                Op::Log(a) => {
                    let xd = &self.nodes[a.0].value.data;
                    for (k, &gi) in g.iter().enumerate() {
                        adjoints[a.0][k] += gi / xd[k];
                    }
                }
                Op::Abs(a) => {
                    let xd = &self.nodes[a.0].value.data;
                    for (k, &gi) in g.iter().enumerate() {
                        adjoints[a.0][k] += gi * sign(xd[k]);
                    }
                }
                Op::Square(a) => {
                    let xd = &self.nodes[a.0].value.data;
                    let two = real::<R>(2.0);
                    for (k, &gi) in g.iter().enumerate() {
                        adjoints[a.0][k] += gi * two * xd[k];
                    }
                }
                Op::Sin(a) => {
                    let xd = &self.nodes[a.0].value.data;
                    for (k, &gi) in g.iter().enumerate() {
                        adjoints[a.0][k] += gi * xd[k].cos();
                    }
                }
                Op::Stack(ref parts) => {
                    for (k, &p) in parts.iter().enumerate() {
                        adjoints[p.0][0] += g[k];
                    }
                }
                Op::Index(v, idx) => {
                    adjoints[v.0][idx] += g[0];
                }
            }
            adjoints[i] = g;
        }

        Ok(leaves
            .iter()
            .map(|&l| Value {
                shape: self.shape(l),
                data: adjoints[l.0].clone(),
            })
            .collect())
    }
}

fn accumulate<R: Real>(dst: &mut [R], g: &[R], f: impl Fn(R, R, usize) -> R) {
    for (k, (y, &gi)) in dst.iter_mut().zip(g).enumerate() {
        *y = f(*y, gi, k);
    }
}

/// ReLU-style subgradient convention: sign(0) = 0.
#[inline]
fn sign<R: Real>(x: R) -> R {
    if x > R::zero() {
        R::one()
    } else if x < R::zero() {
        -R::one()
    } else {
        R::zero()
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        R::one() / (R::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

/// Inverse of [`sigmoid`] on (0, 1).
#[inline]
pub fn logit<R: Real>(p: R) -> R {
    (p / (R::one() - p)).ln()
}

/// Central-difference approximation of the input gradient of a scalar score
/// function, assembled from ordinary forward evaluations on the tape.
///
/// The returned vector node has entries `(h(x + s e_i) - h(x - s e_i)) / 2s`.
/// Because every entry is a composition of primitive forward passes, reverse
/// mode through the *score function's own leaves* (classifier weights) is
/// exact, which is what makes gradient-of-input-gradient penalties trainable
/// without nested reverse mode.
pub fn input_gradient_stencil<R: Real, F>(
    tape: &mut Tape<R>,
    mut score: F,
    x: &[R],
    step: R,
) -> Result<NodeId>
where
    F: FnMut(&mut Tape<R>, &[R]) -> Result<NodeId>,
{
    if !(step > R::zero()) {
        return Err(AutodiffError::BadStencilStep {
            step: step.to_f64().unwrap_or(f64::NAN),
        });
    }
    if x.len() > MAX_STENCIL_DIM {
        return Err(AutodiffError::StencilTooWide {
            dim: x.len(),
            limit: MAX_STENCIL_DIM,
        });
    }
    let half = R::one() / (real::<R>(2.0) * step);
    let mut entries = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let plus = score(tape, &probe)?;
        probe[i] = x[i] - step;
        let minus = score(tape, &probe)?;
        probe[i] = x[i];
        for (name, node) in [("plus", plus), ("minus", minus)] {
            let v = tape.scalar(node);
            if !v.is_finite() {
                return Err(AutodiffError::NonFinite {
                    context: format!("stencil {name} evaluation at coordinate {i}"),
                });
            }
        }
        let diff = tape.sub(plus, minus)?;
        entries.push(tape.scale(diff, half));
    }
    tape.stack(&entries)
}
