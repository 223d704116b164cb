//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] is an eager tape: every primitive computes its value when it is
//! recorded, so evaluation is simply reading the root. [`Graph::backward`]
//! sweeps the tape in reverse and returns gradients for every parameter leaf.
//!
//! Shapes have rank 0 (scalar), 1 (vector) or 2 (row-major matrix).
//! `concat` and `slice` act on the last axis.

mod params;

pub use params::{AdamConfig, Gradients, ParamSet, Parameter};

use crate::error::{Error, Result};
use crate::linalg;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Input,
    Param(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatVec(usize, usize),
    MatMul(usize, usize),
    Tanh(usize),
    Relu(usize),
    Sum(usize),
    Square(usize),
    Concat(Vec<usize>),
    Slice { src: usize, start: usize },
    /// Row-wise map evaluated outside the graph; stores its per-row Jacobian
    /// (`rows × out × in`) so gradients can flow through it.
    External { src: usize, jacobian: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatVec(..) => "matvec",
            Op::MatMul(..) => "matmul",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Sum(_) => "sum",
            Op::Square(_) => "square",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::External { .. } => "external",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Splits a rank-1 or rank-2 shape into (rows, last-axis length).
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => unreachable!("rank > 2"),
    }
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            grad: Vec::new(),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check_shape(shape: &[usize], len: usize, op: &'static str) -> Result<()> {
        if shape.len() > 2 || numel(shape) != len {
            return Err(Error::Shape {
                op,
                lhs: shape.to_vec(),
                rhs: vec![len],
            });
        }
        Ok(())
    }

    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        Self::check_shape(shape, values.len(), "constant")?;
        Ok(self.push(shape.to_vec(), values, Op::Constant, false))
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(vec![], vec![value], Op::Constant, false)
    }

    pub fn matrix(&mut self, m: &linalg::Matrix) -> Var {
        self.push(vec![m.rows, m.cols], m.data.clone(), Op::Constant, false)
    }

    /// A differentiable leaf that is not a parameter; its gradient is read
    /// with [`Graph::grad`] after a backward pass.
    pub fn input(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        Self::check_shape(shape, values.len(), "input")?;
        Ok(self.push(shape.to_vec(), values, Op::Input, true))
    }

    pub fn param(&mut self, params: &ParamSet, index: usize) -> Var {
        let p = &params.params()[index];
        self.push(p.shape.clone(), p.values.clone(), Op::Param(index), true)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Returns the root's values; the tape is eager so this is a read.
    pub fn eval(&self, root: Var) -> Vec<f64> {
        self.nodes[root.0].value.clone()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Gradient accumulated at a node by the last backward pass.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        let n = &self.nodes[v.0];
        if n.grad.is_empty() {
            None
        } else {
            Some(&n.grad)
        }
    }

    fn ng(&self, a: usize) -> bool {
        self.nodes[a].needs_grad
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(Error::Shape {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, op.name())?;
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let value = va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(shape, value, op, ng))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.ng(a.0);
        self.push(shape, value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a.0, c), |x| x * c)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a.0), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a.0), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, Op::Square(a.0), |x| x * x)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        let ng = self.ng(a.0);
        self.push(vec![], vec![s], Op::Sum(a.0), ng)
    }

    pub fn matvec(&mut self, a: Var, x: Var) -> Result<Var> {
        let (sa, sx) = (self.nodes[a.0].shape.clone(), self.nodes[x.0].shape.clone());
        let (m, n) = match (sa.as_slice(), sx.as_slice()) {
            ([m, n], [k]) if n == k => (*m, *n),
            _ => {
                return Err(Error::Shape {
                    op: "matvec",
                    lhs: sa,
                    rhs: sx,
                })
            }
        };
        let value = linalg::matmul(&self.nodes[a.0].value, &self.nodes[x.0].value, m, n, 1);
        let ng = self.ng(a.0) || self.ng(x.0);
        Ok(self.push(vec![m], value, Op::MatVec(a.0, x.0), ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.nodes[a.0].shape.clone(), self.nodes[b.0].shape.clone());
        let (m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => {
                return Err(Error::Shape {
                    op: "matmul",
                    lhs: sa,
                    rhs: sb,
                })
            }
        };
        let value = linalg::matmul(&self.nodes[a.0].value, &self.nodes[b.0].value, m, k, n);
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(vec![m, n], value, Op::MatMul(a.0, b.0), ng))
    }

    /// Concatenates along the last axis. Rank-2 operands must share their row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero operands"))?;
        let rank = self.nodes[first.0].shape.len();
        let rows = rows_cols(&self.nodes[first.0].shape).0;
        for p in parts {
            let s = &self.nodes[p.0].shape;
            if s.len() != rank || rank == 0 || rows_cols(s).0 != rows {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: self.nodes[first.0].shape.clone(),
                    rhs: s.clone(),
                });
            }
        }
        let cols: usize = parts.iter().map(|p| rows_cols(&self.nodes[p.0].shape).1).sum();
        let mut value = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                let c = rows_cols(&self.nodes[p.0].shape).1;
                value.extend_from_slice(&self.nodes[p.0].value[i * c..(i + 1) * c]);
            }
        }
        let shape = if rank == 1 { vec![cols] } else { vec![rows, cols] };
        let ng = parts.iter().any(|p| self.ng(p.0));
        Ok(self.push(
            shape,
            value,
            Op::Concat(parts.iter().map(|p| p.0).collect()),
            ng,
        ))
    }

    /// Takes `len` entries of the last axis starting at `start`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        if shape.is_empty() {
            return Err(Error::Shape {
                op: "slice",
                lhs: shape,
                rhs: vec![start, len],
            });
        }
        let (rows, cols) = rows_cols(&shape);
        if start + len > cols {
            return Err(Error::Shape {
                op: "slice",
                lhs: shape,
                rhs: vec![start, len],
            });
        }
        let src = &self.nodes[a.0].value;
        let mut value = Vec::with_capacity(rows * len);
        for i in 0..rows {
            value.extend_from_slice(&src[i * cols + start..i * cols + start + len]);
        }
        let out_shape = if shape.len() == 1 { vec![len] } else { vec![rows, len] };
        let ng = self.ng(a.0);
        Ok(self.push(out_shape, value, Op::Slice { src: a.0, start }, ng))
    }

    /// Records a row-wise map evaluated elsewhere. `values` is `rows × out`,
    /// `jacobian` is `rows × out × in` (row-major per row).
    pub fn external(
        &mut self,
        a: Var,
        out_cols: usize,
        values: Vec<f64>,
        jacobian: Vec<f64>,
    ) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        let (rows, in_cols) = rows_cols(&shape);
        if shape.len() != 2 || values.len() != rows * out_cols {
            return Err(Error::Shape {
                op: "external",
                lhs: shape,
                rhs: vec![values.len()],
            });
        }
        if jacobian.len() != rows * out_cols * in_cols {
            return Err(Error::Shape {
                op: "external",
                lhs: vec![rows, out_cols, in_cols],
                rhs: vec![jacobian.len()],
            });
        }
        let ng = self.ng(a.0);
        Ok(self.push(
            vec![rows, out_cols],
            values,
            Op::External { src: a.0, jacobian },
            ng,
        ))
    }

    /// Reverse sweep from a scalar root seeded with 1.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        self.backward_with_seed(root, 1.0)
    }

    pub fn backward_with_seed(&mut self, root: Var, seed: f64) -> Result<Gradients> {
        if numel(&self.nodes[root.0].shape) != 1 {
            return Err(Error::NonScalarRoot(self.nodes[root.0].shape.clone()));
        }
        for n in &mut self.nodes {
            n.grad.clear();
        }
        self.nodes[root.0].grad = vec![seed];
        let mut grads = Gradients::default();

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].needs_grad || self.nodes[idx].grad.is_empty() {
                continue;
            }
            let g = std::mem::take(&mut self.nodes[idx].grad);
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Constant);
            self.propagate(idx, &op, &g, &mut grads);
            self.nodes[idx].op = op;
            self.nodes[idx].grad = g;
        }
        Ok(grads)
    }

    fn acc(&mut self, target: usize, f: impl FnOnce(&mut [f64], &[Node])) {
        if !self.nodes[target].needs_grad {
            return;
        }
        let mut g = std::mem::take(&mut self.nodes[target].grad);
        if g.is_empty() {
            g = vec![0.0; self.nodes[target].value.len()];
        }
        f(&mut g, &self.nodes);
        self.nodes[target].grad = g;
    }

    fn propagate(&mut self, idx: usize, op: &Op, g: &[f64], grads: &mut Gradients) {
        match *op {
            Op::Constant | Op::Input => {}
            Op::Param(p) => grads.accumulate(p, g),
            Op::Add(a, b) => {
                self.acc(a, |ga, _| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                self.acc(b, |gb, _| gb.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                self.acc(a, |ga, _| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                self.acc(b, |gb, _| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                self.acc(a, |ga, n| {
                    for ((x, y), v) in ga.iter_mut().zip(g).zip(&n[b].value) {
                        *x += y * v;
                    }
                });
                self.acc(b, |gb, n| {
                    for ((x, y), v) in gb.iter_mut().zip(g).zip(&n[a].value) {
                        *x += y * v;
                    }
                });
            }
            Op::Scale(a, c) => {
                self.acc(a, |ga, _| ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y));
            }
            Op::Tanh(a) => {
                self.acc(a, |ga, n| {
                    for ((x, y), t) in ga.iter_mut().zip(g).zip(&n[idx].value) {
                        *x += y * (1.0 - t * t);
                    }
                });
            }
            Op::Relu(a) => {
                self.acc(a, |ga, n| {
                    for ((x, y), v) in ga.iter_mut().zip(g).zip(&n[a].value) {
                        if *v > 0.0 {
                            *x += y;
                        }
                    }
                });
            }
            Op::Square(a) => {
                self.acc(a, |ga, n| {
                    for ((x, y), v) in ga.iter_mut().zip(g).zip(&n[a].value) {
                        *x += 2.0 * v * y;
                    }
                });
            }
            Op::Sum(a) => {
                let s = g[0];
                self.acc(a, |ga, _| ga.iter_mut().for_each(|x| *x += s));
            }
            Op::MatVec(a, x) => {
                let (m, n) = rows_cols(&self.nodes[a].shape);
                // dA = g ⊗ x, dx = Aᵀ g
                self.acc(a, |ga, nodes| {
                    let xv = &nodes[x].value;
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[i] * xv[j];
                        }
                    }
                });
                self.acc(x, |gx, nodes| {
                    linalg::matmul_at_acc(gx, &nodes[a].value, g, m, n, 1);
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = rows_cols(&self.nodes[a].shape);
                let n = rows_cols(&self.nodes[b].shape).1;
                // dA = G Bᵀ, dB = Aᵀ G
                self.acc(a, |ga, nodes| {
                    linalg::matmul_bt_acc(ga, g, &nodes[b].value, m, n, k);
                });
                self.acc(b, |gb, nodes| {
                    linalg::matmul_at_acc(gb, &nodes[a].value, g, m, k, n);
                });
            }
            Op::Concat(ref parts) => {
                let rows = rows_cols(&self.nodes[idx].shape).0;
                let total = rows_cols(&self.nodes[idx].shape).1;
                let mut offset = 0;
                for &p in parts {
                    let c = rows_cols(&self.nodes[p].shape).1;
                    self.acc(p, |gp, _| {
                        for i in 0..rows {
                            for j in 0..c {
                                gp[i * c + j] += g[i * total + offset + j];
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::Slice { src, start } => {
                let (rows, len) = rows_cols(&self.nodes[idx].shape);
                let cols = rows_cols(&self.nodes[src].shape).1;
                self.acc(src, |gs, _| {
                    for i in 0..rows {
                        for j in 0..len {
                            gs[i * cols + start + j] += g[i * len + j];
                        }
                    }
                });
            }
            Op::External { src, ref jacobian } => {
                let (rows, out) = rows_cols(&self.nodes[idx].shape);
                let inp = rows_cols(&self.nodes[src].shape).1;
                self.acc(src, |gs, _| {
                    for r in 0..rows {
                        let jr = &jacobian[r * out * inp..(r + 1) * out * inp];
                        for i in 0..out {
                            let gi = g[r * out + i];
                            if gi == 0.0 {
                                continue;
                            }
                            for j in 0..inp {
                                gs[r * inp + j] += gi * jr[i * inp + j];
                            }
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests;
