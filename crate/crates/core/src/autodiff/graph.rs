use std::collections::BTreeMap;

use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Rows whose L2 norm falls below this are rejected by normalize/cosine.
pub const MIN_NORM: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right/left operand of a binary op is broadcast.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    ScalarRhs,
    ScalarLhs,
    RowRhs,
    RowLhs,
}

/// Named primitive, for callers that dispatch on an op tag.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    MatMul,
    Transpose,
    Sum,
    Mean,
    SumLast,
    Scale(f64),
    Tanh,
    Silu,
    Exp,
    Log,
    Square,
    Softmax,
    LogSoftmax,
    L2Normalize,
    Norm,
    Cosine,
    Gather(Vec<usize>),
    Pick(Vec<usize>),
    Concat,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Scale(Var, f64),
    Tanh(Var),
    Silu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    L2Normalize(Var),
    Norm(Var),
    Cosine(Var, Var),
    Gather(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    Concat(Vec<Var>),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::Cosine(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumLast(a)
            | Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Silu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::L2Normalize(a)
            | Op::Norm(a)
            | Op::Gather(a, _)
            | Op::Pick(a, _) => vec![*a],
            Op::Concat(xs) => xs.clone(),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumLast(..) => "sum_last",
            Op::Scale(..) => "scale",
            Op::Tanh(..) => "tanh",
            Op::Silu(..) => "silu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Square(..) => "square",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::L2Normalize(..) => "l2_normalize",
            Op::Norm(..) => "norm",
            Op::Cosine(..) => "cosine",
            Op::Gather(..) => "gather",
            Op::Pick(..) => "pick",
            Op::Concat(..) => "concat",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    name: Option<String>,
    requires_grad: bool,
}

/// Accumulated gradients keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

/// Append-only computation graph.
///
/// Nodes are stored in creation order, so every parent index is smaller
/// than its child's and the graph is acyclic by construction. Backward
/// walks the node list in reverse.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, value: Tensor, name: Option<String>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            name,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A named trainable leaf; its gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        self.push_leaf(value, Some(name.into()), true)
    }

    /// Names of trainable leaves in creation order, one entry per binding.
    pub fn param_names(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter(|n| n.requires_grad && matches!(n.op, Op::Leaf))
            .filter_map(|n| n.name.as_deref())
            .collect()
    }

    /// An unnamed leaf that still records its gradient (see [`Graph::grad`]).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, None, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, None, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a node, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.parents()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push_op(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("{} produced {bad}", op.name())));
        }
        let requires_grad = op
            .parents()
            .iter()
            .any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            grad: None,
            op,
            name: None,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Dispatches a named primitive over `inputs`.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        let name = format!("{prim:?}");
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::Shape(format!(
                    "{name} takes {n} inputs, got {}",
                    inputs.len()
                )))
            }
        };
        match prim {
            Primitive::Concat => self.concat(inputs),
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::MatMul | Primitive::Cosine => {
                arity(2)?;
                let (a, b) = (inputs[0], inputs[1]);
                match prim {
                    Primitive::Add => self.add(a, b),
                    Primitive::Sub => self.sub(a, b),
                    Primitive::Mul => self.mul(a, b),
                    Primitive::MatMul => self.matmul(a, b),
                    _ => self.cosine(a, b),
                }
            }
            other => {
                arity(1)?;
                let a = inputs[0];
                match other {
                    Primitive::Transpose => self.transpose(a),
                    Primitive::Sum => self.sum(a),
                    Primitive::Mean => self.mean(a),
                    Primitive::SumLast => self.sum_last(a),
                    Primitive::Scale(c) => self.scale(a, c),
                    Primitive::Tanh => self.tanh(a),
                    Primitive::Silu => self.silu(a),
                    Primitive::Exp => self.exp(a),
                    Primitive::Log => self.log(a),
                    Primitive::Square => self.square(a),
                    Primitive::Softmax => self.softmax(a),
                    Primitive::LogSoftmax => self.log_softmax(a),
                    Primitive::L2Normalize => self.l2_normalize(a),
                    Primitive::Norm => self.norm(a),
                    Primitive::Gather(ids) => self.gather(a, &ids),
                    Primitive::Pick(idx) => self.pick(a, &idx),
                    _ => unreachable!(),
                }
            }
        }
    }

    fn bcast(&self, a: Var, b: Var, allow_row: bool, op: &str) -> Result<(Bcast, Vec<usize>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (na, nb) = (numel(sa), numel(sb));
        if sa == sb {
            return Ok((Bcast::Same, sa.to_vec()));
        }
        if nb == 1 && sb.len() <= 1 {
            return Ok((Bcast::ScalarRhs, sa.to_vec()));
        }
        if na == 1 && sa.len() <= 1 {
            return Ok((Bcast::ScalarLhs, sb.to_vec()));
        }
        if allow_row {
            if sa.len() == 2 && sb.len() == 1 && sa[1] == sb[0] {
                return Ok((Bcast::RowRhs, sa.to_vec()));
            }
            if sb.len() == 2 && sa.len() == 1 && sb[1] == sa[0] {
                return Ok((Bcast::RowLhs, sb.to_vec()));
            }
        }
        Err(Error::Shape(format!("{op} of {sa:?} and {sb:?}")))
    }

    fn zip_bcast(&self, a: Var, b: Var, mode: Bcast, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (da, db) = (self.value(a).data(), self.value(b).data());
        match mode {
            Bcast::Same => da.iter().zip(db).map(|(x, y)| f(*x, *y)).collect(),
            Bcast::ScalarRhs => da.iter().map(|x| f(*x, db[0])).collect(),
            Bcast::ScalarLhs => db.iter().map(|y| f(da[0], *y)).collect(),
            Bcast::RowRhs => {
                let n = db.len();
                da.iter().enumerate().map(|(i, x)| f(*x, db[i % n])).collect()
            }
            Bcast::RowLhs => {
                let n = da.len();
                db.iter().enumerate().map(|(i, y)| f(da[i % n], *y)).collect()
            }
        }
    }

    /// Elementwise sum; also accepts a scalar operand or a row-vector bias.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (mode, shape) = self.bcast(a, b, true, "add")?;
        let data = self.zip_bcast(a, b, mode, |x, y| x + y);
        self.push_op(Op::Add(a, b), shape, data)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (mode, shape) = self.bcast(a, b, false, "sub")?;
        let data = self.zip_bcast(a, b, mode, |x, y| x - y);
        self.push_op(Op::Sub(a, b), shape, data)
    }

    /// Elementwise product; also accepts a scalar operand.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (mode, shape) = self.bcast(a, b, false, "mul")?;
        let data = self.zip_bcast(a, b, mode, |x, y| x * y);
        self.push_op(Op::Mul(a, b), shape, data)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul of {sa:?} and {sb:?}")));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), sa[0], sa[1], sb[1]);
        self.push_op(Op::MatMul(a, b), vec![sa[0], sb[1]], data)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape(format!("transpose of {s:?}")));
        }
        let data = transpose_raw(self.value(a).data(), s[0], s[1]);
        self.push_op(Op::Transpose(a), vec![s[1], s[0]], data)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        self.push_op(Op::Sum(a), vec![], vec![s])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::Shape("mean of empty tensor".into()));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push_op(Op::Mean(a), vec![], vec![s])
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let shape = reduced_shape(t.shape());
        let data = (0..t.rows()).map(|i| t.row(i).iter().sum()).collect();
        self.push_op(Op::SumLast(a), shape, data)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|v| v * c).collect();
        let shape = t.shape().to_vec();
        self.push_op(Op::Scale(a, c), shape, data)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|v| f(*v)).collect();
        let shape = t.shape().to_vec();
        self.push_op(op, shape, data)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Silu(a), |x| x * sigmoid(x))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|v| **v <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        self.map(a, Op::Log(a), f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Square(a), |x| x * x)
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let mut data = Vec::with_capacity(t.len());
        for i in 0..t.rows() {
            data.extend(softmax_row(t.row(i)));
        }
        let shape = t.shape().to_vec();
        self.push_op(Op::Softmax(a), shape, data)
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let mut data = Vec::with_capacity(t.len());
        for i in 0..t.rows() {
            let row = t.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|v| v - lse));
        }
        let shape = t.shape().to_vec();
        self.push_op(Op::LogSoftmax(a), shape, data)
    }

    /// Divides every row (last axis) by its L2 norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let mut data = Vec::with_capacity(t.len());
        for i in 0..t.rows() {
            let row = t.row(i);
            let n = row_norm(row);
            if n < MIN_NORM {
                return Err(Error::Domain(format!("normalize of row {i} with norm {n:e}")));
            }
            data.extend(row.iter().map(|v| v / n));
        }
        let shape = t.shape().to_vec();
        self.push_op(Op::L2Normalize(a), shape, data)
    }

    /// L2 norm over the last axis. The gradient at a zero row is taken as zero.
    pub fn norm(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let shape = reduced_shape(t.shape());
        let data = (0..t.rows()).map(|i| row_norm(t.row(i))).collect();
        self.push_op(Op::Norm(a), shape, data)
    }

    /// Row-wise cosine similarity over the last axis.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "cosine of {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut data = Vec::with_capacity(ta.rows());
        for i in 0..ta.rows() {
            let (ra, rb) = (ta.row(i), tb.row(i));
            let (na, nb) = (row_norm(ra), row_norm(rb));
            if na < MIN_NORM || nb < MIN_NORM {
                return Err(Error::Domain(format!(
                    "cosine with zero-norm row {i} ({na:e}, {nb:e})"
                )));
            }
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            data.push(dot / (na * nb));
        }
        let shape = reduced_shape(ta.shape());
        self.push_op(Op::Cosine(a, b), shape, data)
    }

    /// Embedding lookup: rows `ids` of a `[V, d]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(Error::Shape(format!("gather from {:?}", t.shape())));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Shape(format!("gather id {id} from table of {v} rows")));
            }
            data.extend_from_slice(t.row(id));
        }
        self.push_op(Op::Gather(table, ids.to_vec()), vec![ids.len(), d], data)
    }

    /// Selects one column per row of a `[r, c]` matrix.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 || t.shape()[0] != idx.len() {
            return Err(Error::Shape(format!(
                "pick {} indices from {:?}",
                idx.len(),
                t.shape()
            )));
        }
        let c = t.shape()[1];
        let mut data = Vec::with_capacity(idx.len());
        for (i, &j) in idx.iter().enumerate() {
            if j >= c {
                return Err(Error::Shape(format!("pick column {j} of {c}")));
            }
            data.push(t.row(i)[j]);
        }
        self.push_op(Op::Pick(a, idx.to_vec()), vec![idx.len()], data)
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let lead = &self.shape(*first)[..self.shape(*first).len().saturating_sub(1)];
        let rows = self.value(*first).rows();
        let mut width = 0;
        for x in xs {
            let s = self.shape(*x);
            if s.is_empty() || &s[..s.len() - 1] != lead {
                return Err(Error::Shape(format!(
                    "concat of {:?} and {:?}",
                    self.shape(*first),
                    s
                )));
            }
            width += s[s.len() - 1];
        }
        let mut data = Vec::with_capacity(rows * width);
        for i in 0..rows {
            for x in xs {
                data.extend_from_slice(self.value(*x).row(i));
            }
        }
        let mut shape = lead.to_vec();
        shape.push(width);
        self.push_op(Op::Concat(xs.to_vec()), shape, data)
    }

    /// Reverse sweep from a scalar root.
    ///
    /// Gradients accumulate into every node reached, so calling this twice
    /// without [`Graph::zero_grad`] doubles them. Returns the accumulated
    /// gradients of all named parameters.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        let rv = &self.nodes[root.0].value;
        if rv.len() != 1 || rv.shape().len() > 1 {
            return Err(Error::Shape(format!(
                "backward from non-scalar root of shape {:?}",
                rv.shape()
            )));
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        local[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = local[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut local);
            }
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => {
                    for (a, v) in acc.data_mut().iter_mut().zip(&g) {
                        *a += v;
                    }
                }
                None => node.grad = Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
            }
        }
        Ok(self.gradients())
    }

    /// Accumulated gradients of named parameters (summed over repeats of a name).
    pub fn gradients(&self) -> Gradients {
        let mut out = Gradients::new();
        for node in &self.nodes {
            let (Some(name), Some(g)) = (&node.name, &node.grad) else {
                continue;
            };
            match out.get_mut(name) {
                Some(acc) => {
                    for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += v;
                    }
                }
                None => {
                    out.insert(name.clone(), g.clone());
                }
            }
        }
        out
    }

    fn propagate(&self, i: usize, g: &[f64], local: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut local[v.0] {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(&contrib) {
                        *a += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                send(*a, collapse(g, val(*a).len()));
                send(*b, collapse(g, val(*b).len()).into_iter().map(|v| sign * v).collect());
            }
            Op::Mul(a, b) => {
                let (da, db) = (val(*a), val(*b));
                let full_a = expand(da, g.len());
                let full_b = expand(db, g.len());
                let ga_full: Vec<f64> = g.iter().zip(&full_b).map(|(x, y)| x * y).collect();
                let gb_full: Vec<f64> = g.iter().zip(&full_a).map(|(x, y)| x * y).collect();
                let ga = collapse(&ga_full, da.len());
                let gb = collapse(&gb_full, db.len());
                send(*a, ga);
                send(*b, gb);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let bt = transpose_raw(val(*b), k, n);
                send(*a, matmul_raw(g, &bt, m, n, k));
                let at = transpose_raw(val(*a), m, k);
                send(*b, matmul_raw(&at, g, k, m, n));
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                send(*a, transpose_raw(g, s[0], s[1]));
            }
            Op::Sum(a) => send(*a, vec![g[0]; val(*a).len()]),
            Op::Mean(a) => {
                let n = val(*a).len();
                send(*a, vec![g[0] / n as f64; n]);
            }
            Op::SumLast(a) => {
                let n = self.nodes[a.0].value.last_dim();
                send(*a, (0..val(*a).len()).map(|j| g[j / n]).collect());
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|v| v * c).collect()),
            Op::Tanh(a) => send(*a, g.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)).collect()),
            Op::Silu(a) => send(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(g, x)| {
                        let s = sigmoid(*x);
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect(),
            ),
            Op::Exp(a) => send(*a, g.iter().zip(out).map(|(g, y)| g * y).collect()),
            Op::Log(a) => send(*a, g.iter().zip(val(*a)).map(|(g, x)| g / x).collect()),
            Op::Square(a) => send(*a, g.iter().zip(val(*a)).map(|(g, x)| 2.0 * g * x).collect()),
            Op::Softmax(a) => {
                let n = node.value.last_dim();
                let mut ga = vec![0.0; g.len()];
                for r in 0..g.len() / n {
                    let (gr, yr) = (&g[r * n..(r + 1) * n], &out[r * n..(r + 1) * n]);
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for j in 0..n {
                        ga[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                send(*a, ga);
            }
            Op::LogSoftmax(a) => {
                let n = node.value.last_dim();
                let mut ga = vec![0.0; g.len()];
                for r in 0..g.len() / n {
                    let (gr, yr) = (&g[r * n..(r + 1) * n], &out[r * n..(r + 1) * n]);
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..n {
                        ga[r * n + j] = gr[j] - yr[j].exp() * gsum;
                    }
                }
                send(*a, ga);
            }
            Op::L2Normalize(a) => {
                let x = val(*a);
                let n = node.value.last_dim();
                let mut ga = vec![0.0; g.len()];
                for r in 0..g.len() / n {
                    let xr = &x[r * n..(r + 1) * n];
                    let (gr, yr) = (&g[r * n..(r + 1) * n], &out[r * n..(r + 1) * n]);
                    let norm = row_norm(xr);
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for j in 0..n {
                        ga[r * n + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                send(*a, ga);
            }
            Op::Norm(a) => {
                let x = val(*a);
                let n = self.nodes[a.0].value.last_dim();
                let mut ga = vec![0.0; x.len()];
                for r in 0..g.len() {
                    let nr = out[r];
                    if nr == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        ga[r * n + j] = g[r] * x[r * n + j] / nr;
                    }
                }
                send(*a, ga);
            }
            Op::Cosine(a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                let n = self.nodes[a.0].value.last_dim();
                let mut ga = vec![0.0; xa.len()];
                let mut gb = vec![0.0; xb.len()];
                for r in 0..g.len() {
                    let (ra, rb) = (&xa[r * n..(r + 1) * n], &xb[r * n..(r + 1) * n]);
                    let (na, nb) = (row_norm(ra), row_norm(rb));
                    let c = out[r];
                    for j in 0..n {
                        ga[r * n + j] = g[r] * (rb[j] / (na * nb) - c * ra[j] / (na * na));
                        gb[r * n + j] = g[r] * (ra[j] / (na * nb) - c * rb[j] / (nb * nb));
                    }
                }
                send(*a, ga);
                send(*b, gb);
            }
            Op::Gather(table, ids) => {
                let d = node.value.last_dim();
                let mut gt = vec![0.0; val(*table).len()];
                for (k, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[k * d + j];
                    }
                }
                send(*table, gt);
            }
            Op::Pick(a, idx) => {
                let c = self.nodes[a.0].value.last_dim();
                let mut ga = vec![0.0; val(*a).len()];
                for (i, &j) in idx.iter().enumerate() {
                    ga[i * c + j] = g[i];
                }
                send(*a, ga);
            }
            Op::Concat(xs) => {
                let width = node.value.last_dim();
                let rows = node.value.rows();
                let mut offset = 0;
                for x in xs {
                    let w = self.nodes[x.0].value.last_dim();
                    let mut gx = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        gx.extend_from_slice(&g[r * width + offset..r * width + offset + w]);
                    }
                    offset += w;
                    send(*x, gx);
                }
            }
        }
    }
}

fn reduced_shape(shape: &[usize]) -> Vec<usize> {
    if shape.is_empty() {
        vec![]
    } else {
        shape[..shape.len() - 1].to_vec()
    }
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Repeats a broadcast operand up to the output length.
fn expand(d: &[f64], len: usize) -> Vec<f64> {
    if d.len() == len {
        return d.to_vec();
    }
    (0..len).map(|i| d[i % d.len()]).collect()
}

/// Sums a full-length gradient back down to an operand of `n` entries.
fn collapse(g: &[f64], n: usize) -> Vec<f64> {
    if n == g.len() {
        return g.to_vec();
    }
    let mut out = vec![0.0; n];
    for (i, v) in g.iter().enumerate() {
        out[i % n] += v;
    }
    out
}
