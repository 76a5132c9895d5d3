//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every forward operation in creation order, so node
//! indices are already a topological order and [`Graph::backward`] simply walks
//! them in reverse. Tensors are row-major; most operations work on 2-D
//! `rows x cols` tensors. The only implicit broadcasting is between a
//! single-element tensor and an arbitrary tensor in the elementwise binary ops.
//! Row-wise broadcasting has its own named ops ([`Graph::add_bias`],
//! [`Graph::mul_rows`], [`Graph::div_rows`]).

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(shape_err("tensor", format!("invalid shape {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {shape:?} needs {len} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Tensor {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// A `1 x n` row.
    pub fn row(data: &[f64]) -> Tensor {
        Tensor {
            shape: vec![1, data.len()],
            data: data.to_vec(),
        }
    }

    /// Stacks equal-length rows into a `rows x cols` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Tensor> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(shape_err("from_rows", "ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    fn as_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err(op, format!("expected a 2-D tensor, got {s:?}"))),
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    MulRows(Var, Var),
    DivRows(Var, Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Neg(Var),
    Relu(Var),
    Sqrt(Var),
    Exp(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    Norm(Var),
    RowNorm(Var),
    Scale(Var, f64),
    AddScalar(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Forward record of one computation. Build a fresh graph per evaluation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node that requires one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when no gradient reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

/// Elementwise binary broadcast mode.
#[derive(Clone, Copy)]
enum Bcast {
    Same,
    LeftScalar,
    RightScalar,
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFiniteValue { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape == tb.shape {
            Ok(Bcast::Same)
        } else if ta.is_scalar() {
            Ok(Bcast::LeftScalar)
        } else if tb.is_scalar() {
            Ok(Bcast::RightScalar)
        } else {
            Err(shape_err(op, format!("{:?} vs {:?}", ta.shape, tb.shape)))
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let mode = self.bcast(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let out = match mode {
            Bcast::Same => Tensor {
                shape: ta.shape.clone(),
                data: ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect(),
            },
            Bcast::LeftScalar => {
                let x = ta.data[0];
                tb.map(|y| f(x, y))
            }
            Bcast::RightScalar => {
                let y = tb.data[0];
                ta.map(|x| f(x, y))
            }
        };
        self.push(name, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `(n x k) . (k x m) -> (n x m)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(a).as_matrix("matmul")?;
        let (k2, m) = self.value(b).as_matrix("matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("({n}x{k}) . ({k2}x{m})")));
        }
        let out = matmul_raw(&self.value(a).data, &self.value(b).data, n, k, m);
        self.push(
            "matmul",
            Tensor {
                shape: vec![n, m],
                data: out,
            },
            Op::MatMul(a, b),
            &[a, b],
        )
    }

    /// Adds a length-`k` bias to every row of an `n x k` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (n, k) = self.value(a).as_matrix("add_bias")?;
        if self.value(bias).len() != k {
            return Err(shape_err(
                "add_bias",
                format!("bias of {} for {k} columns", self.value(bias).len()),
            ));
        }
        let b = &self.value(bias).data;
        let mut data = self.value(a).data.clone();
        for r in 0..n {
            for (x, bv) in data[r * k..(r + 1) * k].iter_mut().zip(b) {
                *x += bv;
            }
        }
        self.push(
            "add_bias",
            Tensor {
                shape: vec![n, k],
                data,
            },
            Op::AddBias(a, bias),
            &[a, bias],
        )
    }

    fn row_scale_check(&self, op: &'static str, a: Var, s: Var) -> Result<(usize, usize)> {
        let (n, k) = self.value(a).as_matrix(op)?;
        let sv = self.value(s);
        if sv.len() != n || sv.cols() != 1 && n > 1 {
            return Err(shape_err(op, format!("row factors {:?} for {n} rows", sv.shape)));
        }
        Ok((n, k))
    }

    /// Multiplies row `i` of `a (n x k)` by `s[i]`, with `s` of shape `n x 1`.
    pub fn mul_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (n, k) = self.row_scale_check("mul_rows", a, s)?;
        let sv = &self.value(s).data;
        let mut data = self.value(a).data.clone();
        for r in 0..n {
            data[r * k..(r + 1) * k].iter_mut().for_each(|x| *x *= sv[r]);
        }
        self.push(
            "mul_rows",
            Tensor {
                shape: vec![n, k],
                data,
            },
            Op::MulRows(a, s),
            &[a, s],
        )
    }

    /// Divides row `i` of `a (n x k)` by `s[i]`, with `s` of shape `n x 1`.
    pub fn div_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (n, k) = self.row_scale_check("div_rows", a, s)?;
        let sv = &self.value(s).data;
        let mut data = self.value(a).data.clone();
        for r in 0..n {
            data[r * k..(r + 1) * k].iter_mut().for_each(|x| *x /= sv[r]);
        }
        self.push(
            "div_rows",
            Tensor {
                shape: vec![n, k],
                data,
            },
            Op::DivRows(a, s),
            &[a, s],
        )
    }

    /// Concatenates 2-D tensors with equal row counts side by side.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs".into()))?;
        let (n, _) = self.value(first).as_matrix("concat")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).as_matrix("concat")?;
            if r != n {
                return Err(shape_err("concat", format!("row counts {n} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data[r * w..(r + 1) * w]);
            }
        }
        self.push(
            "concat",
            Tensor {
                shape: vec![n, total],
                data,
            },
            Op::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (n, k) = self.value(a).as_matrix("slice")?;
        if start >= end || end > k {
            return Err(shape_err("slice", format!("columns {start}..{end} of {k}")));
        }
        let src = &self.value(a).data;
        let w = end - start;
        let mut data = Vec::with_capacity(n * w);
        for r in 0..n {
            data.extend_from_slice(&src[r * k + start..r * k + end]);
        }
        self.push(
            "slice",
            Tensor {
                shape: vec![n, w],
                data,
            },
            Op::SliceCols(a, start),
            &[a],
        )
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.value(a).map(f);
        self.push(name, out, op, &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary("neg", a, |x| -x, Op::Neg(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary("sqrt", a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data.iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let m = t.data.iter().sum::<f64>() / t.len() as f64;
        self.push("mean", Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// Per-row sums: `n x k -> n x 1`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (n, _) = self.value(a).as_matrix("sum_rows")?;
        let t = self.value(a);
        let data = (0..n).map(|r| t.row_slice(r).iter().sum()).collect();
        self.push(
            "sum_rows",
            Tensor {
                shape: vec![n, 1],
                data,
            },
            Op::SumRows(a),
            &[a],
        )
    }

    /// Euclidean norm of the whole tensor.
    pub fn euclidean_norm(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).squared_norm().sqrt();
        self.push("euclidean_norm", Tensor::scalar(n), Op::Norm(a), &[a])
    }

    /// Euclidean norm of every row: `n x k -> n x 1`.
    pub fn row_norm(&mut self, a: Var) -> Result<Var> {
        let (n, _) = self.value(a).as_matrix("row_norm")?;
        let t = self.value(a);
        let data = (0..n)
            .map(|r| t.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        self.push(
            "row_norm",
            Tensor {
                shape: vec![n, 1],
                data,
            },
            Op::RowNorm(a),
            &[a],
        )
    }

    /// Backpropagates from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NotScalarLoss {
                shape: lt.shape.clone(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(&lt.shape, 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Gradient for one side of a possibly scalar-broadcast binary op.
    fn reduce_to(&self, v: Var, g: Tensor) -> Tensor {
        if self.value(v).len() == g.len() {
            g
        } else {
            Tensor {
                shape: self.value(v).shape.clone(),
                data: vec![g.data.iter().sum()],
            }
        }
    }

    /// Broadcasts `v`'s value against `g` for elementwise gradient formulas.
    fn val_at(&self, v: Var, i: usize) -> f64 {
        let t = self.value(v);
        if t.len() == 1 {
            t.data[0]
        } else {
            t.data[i]
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, self.reduce_to(*a, g.clone()));
                self.accumulate(grads, *b, self.reduce_to(*b, g.clone()));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, self.reduce_to(*a, g.clone()));
                self.accumulate(grads, *b, self.reduce_to(*b, g.map(|x| -x)));
            }
            Op::Mul(a, b) => {
                let ga = elementwise(g, |i, gi| gi * self.val_at(*b, i));
                let gb = elementwise(g, |i, gi| gi * self.val_at(*a, i));
                self.accumulate(grads, *a, self.reduce_to(*a, ga));
                self.accumulate(grads, *b, self.reduce_to(*b, gb));
            }
            Op::Div(a, b) => {
                let ga = elementwise(g, |i, gi| gi / self.val_at(*b, i));
                let gb = elementwise(g, |i, gi| {
                    let bv = self.val_at(*b, i);
                    -gi * self.val_at(*a, i) / (bv * bv)
                });
                self.accumulate(grads, *a, self.reduce_to(*a, ga));
                self.accumulate(grads, *b, self.reduce_to(*b, gb));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k) = (ta.shape[0], ta.shape[1]);
                let m = tb.shape[1];
                if self.requires_grad(*a) {
                    // g (n x m) . b^T (m x k)
                    let mut ga = vec![0.0; n * k];
                    for i in 0..n {
                        let grow = &g.data[i * m..(i + 1) * m];
                        for p in 0..k {
                            let brow = &tb.data[p * m..(p + 1) * m];
                            ga[i * k + p] = dot(grow, brow);
                        }
                    }
                    self.accumulate(grads, *a, Tensor { shape: vec![n, k], data: ga });
                }
                if self.requires_grad(*b) {
                    // a^T (k x n) . g (n x m)
                    let mut gb = vec![0.0; k * m];
                    for i in 0..n {
                        let grow = &g.data[i * m..(i + 1) * m];
                        for p in 0..k {
                            let av = ta.data[i * k + p];
                            if av != 0.0 {
                                axpy(av, grow, &mut gb[p * m..(p + 1) * m]);
                            }
                        }
                    }
                    self.accumulate(grads, *b, Tensor { shape: vec![k, m], data: gb });
                }
            }
            Op::AddBias(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                let k = g.cols();
                let mut gb = vec![0.0; k];
                for r in 0..g.rows() {
                    axpy(1.0, g.row_slice(r), &mut gb);
                }
                let shape = self.value(*bias).shape.clone();
                self.accumulate(grads, *bias, Tensor { shape, data: gb });
            }
            Op::MulRows(a, s) => {
                let (ta, ts) = (self.value(*a), self.value(*s));
                let k = ta.cols();
                let ga = elementwise(g, |i, gi| gi * ts.data[i / k]);
                let gs = (0..ta.rows())
                    .map(|r| dot(g.row_slice(r), ta.row_slice(r)))
                    .collect();
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *s, Tensor { shape: ts.shape.clone(), data: gs });
            }
            Op::DivRows(a, s) => {
                let (ta, ts) = (self.value(*a), self.value(*s));
                let k = ta.cols();
                let ga = elementwise(g, |i, gi| gi / ts.data[i / k]);
                let gs = (0..ta.rows())
                    .map(|r| {
                        let sv = ts.data[r];
                        -dot(g.row_slice(r), ta.row_slice(r)) / (sv * sv)
                    })
                    .collect();
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *s, Tensor { shape: ts.shape.clone(), data: gs });
            }
            Op::ConcatCols(parts) => {
                let n = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut data = Vec::with_capacity(n * w);
                    for r in 0..n {
                        data.extend_from_slice(&g.data[r * total + offset..r * total + offset + w]);
                    }
                    offset += w;
                    self.accumulate(grads, p, Tensor { shape: vec![n, w], data });
                }
            }
            Op::SliceCols(a, start) => {
                let ta = self.value(*a);
                let (n, k) = (ta.shape[0], ta.shape[1]);
                let w = g.cols();
                let mut data = vec![0.0; n * k];
                for r in 0..n {
                    data[r * k + start..r * k + start + w].copy_from_slice(g.row_slice(r));
                }
                self.accumulate(grads, *a, Tensor { shape: vec![n, k], data });
            }
            Op::Neg(a) => self.accumulate(grads, *a, g.map(|x| -x)),
            Op::Relu(a) => {
                // subgradient 0 at the kink
                let ga = elementwise(g, |i, gi| if self.val_at(*a, i) > 0.0 { gi } else { 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::Sqrt(a) => {
                let ga = elementwise(g, |i, gi| {
                    let o = out.data[i];
                    if o > 0.0 {
                        gi * 0.5 / o
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Exp(a) => {
                let ga = elementwise(g, |i, gi| gi * out.data[i]);
                self.accumulate(grads, *a, ga);
            }
            Op::Square(a) => {
                let ga = elementwise(g, |i, gi| 2.0 * gi * self.val_at(*a, i));
                self.accumulate(grads, *a, ga);
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| x * c)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Sum(a) => {
                let shape = &self.value(*a).shape;
                self.accumulate(grads, *a, Tensor::full(shape, g.data[0]));
            }
            Op::Mean(a) => {
                let ta = self.value(*a);
                self.accumulate(grads, *a, Tensor::full(&ta.shape, g.data[0] / ta.len() as f64));
            }
            Op::SumRows(a) => {
                let ta = self.value(*a);
                let k = ta.cols();
                let ga = elementwise(ta, |i, _| g.data[i / k]);
                self.accumulate(grads, *a, ga);
            }
            Op::Norm(a) => {
                let ta = self.value(*a);
                let n = out.data[0];
                let ga = if n > 0.0 {
                    ta.map(|x| g.data[0] * x / n)
                } else {
                    Tensor::zeros(&ta.shape)
                };
                self.accumulate(grads, *a, ga);
            }
            Op::RowNorm(a) => {
                let ta = self.value(*a);
                let k = ta.cols();
                let ga = elementwise(ta, |i, x| {
                    let n = out.data[i / k];
                    if n > 0.0 {
                        g.data[i / k] * x / n
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *a, ga);
            }
        }
    }
}

fn elementwise(like: &Tensor, f: impl Fn(usize, f64) -> f64) -> Tensor {
    Tensor {
        shape: like.shape.clone(),
        data: like.data.iter().enumerate().map(|(i, &v)| f(i, v)).collect(),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                axpy(av, &b[p * m..(p + 1) * m], orow);
            }
        }
    }
    out
}

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    /// Largest `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input index, flat element index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub entries_checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Checks the gradient of a scalar function of `point` with central
/// differences of step `step`.
///
/// The caller keeps `point` away from relu kinks and hinge boundaries; inside
/// `step` of such a point the two sides of the difference see different
/// branches.
pub fn gradcheck<F>(f: F, point: &[Tensor], step: f64, tolerance: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if !v.is_scalar() {
            return Err(Error::NotScalarLoss { shape: v.shape.clone() });
        }
        Ok(v.item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(point)
        .map(|(&v, t)| grads.get_or_zeros(v, t))
        .collect();

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        entries_checked: 0,
        tolerance,
        passed: true,
    };
    let mut probe = point.to_vec();
    for (ti, t) in point.iter().enumerate() {
        for ei in 0..t.len() {
            let orig = t.data[ei];
            probe[ti].data[ei] = orig + step;
            let up = eval(&probe)?;
            probe[ti].data[ei] = orig - step;
            let down = eval(&probe)?;
            probe[ti].data[ei] = orig;

            let numeric = (up - down) / (2.0 * step);
            let a = analytic[ti].data[ei];
            let abs = (a - numeric).abs();
            let rel = abs / 1f64.max(a.abs()).max(numeric.abs());
            report.entries_checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((ti, ei));
            }
        }
    }
    report.passed = report.max_rel_error <= tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor {
        Tensor::row(v)
    }

    #[test]
    fn forward_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let n = g.euclidean_norm(x).unwrap();
        assert_eq!(g.value(n).item(), 5.0);

        let x = g.constant(Tensor::vector(vec![-1.0, 2.0]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 2.0]);

        let a = g.constant(row(&[1.0, 2.0, 3.0]));
        let b = g.constant(row(&[4.0, 5.0, 6.0, 7.0]));
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 7]);
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, -2.0, 0.5, 7.0]));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 4]);

        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![3.0, 4.0]));
        let n = g.euclidean_norm(x).unwrap();
        let grads = g.backward(n).unwrap();
        let gx = grads.get(x).unwrap().data();
        assert!((gx[0] - 0.6).abs() < 1e-15 && (gx[1] - 0.8).abs() < 1e-15);

        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.square(x).unwrap();
        assert_eq!(g.backward(y).unwrap().get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(1.5));
        let y = g.add(x, x).unwrap();
        assert_eq!(g.backward(y).unwrap().get(x).unwrap().item(), 2.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = g.square(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::NotScalarLoss { .. })));
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(g.add(a, b), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(g.matmul(a, b), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(g.slice(a, 2, 5), Err(Error::ShapeMismatch { .. })));
        let c = g.constant(Tensor::zeros(&[3, 1]));
        assert!(matches!(g.concat(&[a, c]), Err(Error::ShapeMismatch { .. })));
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn non_finite_values_are_reported() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(1000.0));
        assert!(matches!(g.exp(x), Err(Error::NonFiniteValue { op: "exp" })));
        let z = g.constant(Tensor::scalar(0.0));
        let one = g.constant(Tensor::scalar(1.0));
        assert!(matches!(g.div(one, z), Err(Error::NonFiniteValue { .. })));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let c = g.constant(Tensor::scalar(5.0));
        let y = g.mul(x, c).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 5.0);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn relu_kink_has_zero_subgradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![0.0, 1.0]));
        let r = g.relu(x).unwrap();
        let s = g.sum(r).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn gradcheck_constant_function() {
        let point = [Tensor::vector(vec![0.3, -0.2])];
        let report = gradcheck(
            |g, _| Ok(g.constant(Tensor::scalar(4.0))),
            &point,
            1e-6,
            1e-5,
        )
        .unwrap();
        assert!(report.passed);
        assert_eq!(report.max_abs_error, 0.0);
    }

    #[test]
    fn gradcheck_every_op() {
        // One composite expression touching every differentiable op.
        let a = Tensor::new(vec![2, 3], vec![0.3, -0.7, 1.1, 0.4, 0.9, -1.3]).unwrap();
        let w = Tensor::new(vec![3, 4], (0..12).map(|i| 0.1 * i as f64 - 0.45).collect()).unwrap();
        let bias = Tensor::vector(vec![0.05, -0.1, 0.2, 0.3]);
        let s = Tensor::new(vec![2, 1], vec![1.7, 0.6]).unwrap();
        let report = gradcheck(
            |g, v| {
                let h = g.matmul(v[0], v[1])?;
                let h = g.add_bias(h, v[2])?;
                let h = g.relu(h)?;
                let h = g.mul_rows(h, v[3])?;
                let left = g.slice(h, 0, 2)?;
                let right = g.slice(h, 2, 4)?;
                let d = g.div_rows(right, v[3])?;
                let c = g.concat(&[left, d, v[0]])?;
                let sq = g.square(c)?;
                let rn = g.row_norm(c)?;
                let e = g.scale(rn, -0.3)?;
                let e = g.exp(e)?;
                let t = g.sum_rows(sq)?;
                let t = g.add_scalar(t, 1.0)?;
                let t = g.sqrt(t)?;
                let q = g.div(t, e)?;
                let q = g.sub(q, rn)?;
                let q = g.neg(q)?;
                let m = g.mean(q)?;
                let n = g.euclidean_norm(c)?;
                let k = g.mul(m, n)?;
                let total = g.sum(t)?;
                g.add(k, total)
            },
            &[a, w, bias, s],
            1e-6,
            1e-5,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn scalar_broadcast_gradients() {
        let t = Tensor::vector(vec![0.5, -1.5, 2.0]);
        let s = Tensor::scalar(0.7);
        let report = gradcheck(
            |g, v| {
                let a = g.mul(v[1], v[0])?;
                let b = g.sub(a, v[1])?;
                let c = g.div(b, v[1])?;
                let d = g.add(v[1], c)?;
                let e = g.square(d)?;
                g.sum(e)
            },
            &[t, s],
            1e-6,
            1e-5,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}
