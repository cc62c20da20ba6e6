//! Tape-based reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records nodes in creation order. Values are computed eagerly
//! when a node is pushed, so creation order is a topological order and
//! [`Graph::backward`] simply walks the tape in reverse.
//!
//! The primitive set is deliberately small: elementwise add/mul, matrix
//! product, column concatenation, sum, mean, mean squared error, `tanh`,
//! SiLU, scalar scaling and row-wise L2 normalization. Broadcasting is
//! restricted to scalar-with-tensor and row-vector-over-matrix.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Operand, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Constant,
    Parameter,
    Add,
    Mul,
    MatMul,
    Concat,
    Sum,
    Mean,
    Mse,
    Tanh,
    Silu,
    Scale,
    NormalizeRows,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    Concat(Vec<usize>),
    Sum(usize),
    Mean(usize),
    Mse(usize, usize),
    Tanh(usize),
    Silu(usize),
    Scale(usize, f64),
    /// Caches the row norms of the input.
    NormalizeRows(usize, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    kind: OpKind,
    op: Op,
    requires_grad: bool,
}

/// How the right operand of a binary elementwise op lines up with the left.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Broadcast {
    Same,
    /// Left is a one-element tensor.
    LhsScalar,
    RhsScalar,
    /// Left is a row vector repeated over the rows of the right matrix.
    LhsRow,
    RhsRow,
}

fn broadcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(Broadcast, Vec<usize>)> {
    let err = || Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    };
    if a.shape() == b.shape() {
        return Ok((Broadcast::Same, a.shape().to_vec()));
    }
    if a.numel() == 1 {
        return Ok((Broadcast::LhsScalar, b.shape().to_vec()));
    }
    if b.numel() == 1 {
        return Ok((Broadcast::RhsScalar, a.shape().to_vec()));
    }
    let is_row = |t: &Tensor| t.rank() == 1 || (t.rank() == 2 && t.shape()[0] == 1);
    if a.rank() == 2 && is_row(b) && b.numel() == a.shape()[1] {
        return Ok((Broadcast::RhsRow, a.shape().to_vec()));
    }
    if b.rank() == 2 && is_row(a) && a.numel() == b.shape()[1] {
        return Ok((Broadcast::LhsRow, b.shape().to_vec()));
    }
    Err(err())
}

fn elementwise(a: &Tensor, b: &Tensor, kind: Broadcast, shape: Vec<usize>, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (ad, bd) = (a.data(), b.data());
    let data: Vec<f64> = match kind {
        Broadcast::Same => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
        Broadcast::LhsScalar => bd.iter().map(|&y| f(ad[0], y)).collect(),
        Broadcast::RhsScalar => ad.iter().map(|&x| f(x, bd[0])).collect(),
        Broadcast::RhsRow => {
            let n = bd.len();
            ad.iter().enumerate().map(|(i, &x)| f(x, bd[i % n])).collect()
        }
        Broadcast::LhsRow => {
            let n = ad.len();
            bd.iter().enumerate().map(|(i, &y)| f(ad[i % n], y)).collect()
        }
    };
    Tensor::from_parts(shape, data)
}

/// Sums a full-shape gradient down to the shape of a broadcast operand.
fn reduce_to(grad: &Tensor, target: &Tensor, broadcast_operand: bool, row: bool) -> Tensor {
    if !broadcast_operand {
        return grad.clone();
    }
    if row {
        let n = target.numel();
        let mut acc = vec![0.0; n];
        for (i, g) in grad.data().iter().enumerate() {
            acc[i % n] += g;
        }
        Tensor::from_parts(target.shape().to_vec(), acc)
    } else {
        Tensor::from_parts(target.shape().to_vec(), vec![grad.sum()])
    }
}

/// Gradients of a scalar root with respect to every parameter leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v.0)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.remove(&v.0)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// A recorded computation.
#[derive(Debug, Default)]
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

    fn push(&mut self, value: Tensor, kind: OpKind, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("output of {kind:?}")));
        }
        self.nodes.push(Node {
            value,
            kind,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            kind: OpKind::Constant,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn parameter(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            kind: OpKind::Parameter,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Stop-gradient: a constant copy of `v`'s value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.node(v).value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.node(v).kind
    }

    /// Value at `root`. Values are computed when nodes are created, so this
    /// only reads the cache.
    pub fn forward(&self, root: Var) -> Tensor {
        self.node(root).value.clone()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.node(a).value, &self.node(b).value);
        let (bc, shape) = broadcast_kind("add", ta, tb)?;
        let out = elementwise(ta, tb, bc, shape, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(out, OpKind::Add, Op::Add(a.0, b.0), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.node(a).value, &self.node(b).value);
        let (bc, shape) = broadcast_kind("mul", ta, tb)?;
        let out = elementwise(ta, tb, bc, shape, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(out, OpKind::Mul, Op::Mul(a.0, b.0), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.node(a).value.matmul(&self.node(b).value)?;
        let rg = self.rg(&[a, b]);
        self.push(out, OpKind::MatMul, Op::MatMul(a.0, b.0), rg)
    }

    /// Concatenates along the last axis. Inputs are all rank 1, or all rank 2
    /// with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::arg("concat of zero tensors"))?;
        let t0 = &self.node(*first).value;
        let rank = t0.rank();
        let rows = t0.rows();
        for p in &parts[1..] {
            let t = &self.node(*p).value;
            if t.rank() != rank || rank == 0 || rank > 2 || t.rows() != rows {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: t0.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let total: usize = parts.iter().map(|p| self.node(*p).value.cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.node(*p).value.row(r));
            }
        }
        let shape = if rank == 1 { vec![total] } else { vec![rows, total] };
        let rg = self.rg(parts);
        let ids = parts.iter().map(|p| p.0).collect();
        self.push(Tensor::from_parts(shape, data), OpKind::Concat, Op::Concat(ids), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.node(a).value.sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), OpKind::Sum, Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = &self.node(a).value;
        let m = t.sum() / t.numel() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(m), OpKind::Mean, Op::Mean(a.0), rg)
    }

    /// Mean of squared differences over all elements; operands must share a shape.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.node(a).value, &self.node(b).value);
        if ta.shape() != tb.shape() {
            return Err(Error::Shape {
                op: "mse",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let m = s / ta.numel() as f64;
        let rg = self.rg(&[a, b]);
        self.push(Tensor::scalar(m), OpKind::Mse, Op::Mse(a.0, b.0), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.node(a).value.map(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(out, OpKind::Tanh, Op::Tanh(a.0), rg)
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.node(a).value.map(silu);
        let rg = self.rg(&[a]);
        self.push(out, OpKind::Silu, Op::Silu(a.0), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.node(a).value.scale(s);
        let rg = self.rg(&[a]);
        self.push(out, OpKind::Scale, Op::Scale(a.0, s), rg)
    }

    /// Divides every row by its L2 norm. A rank-1 input is one row.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let t = &self.node(a).value;
        if t.rank() == 0 || t.rank() > 2 {
            return Err(Error::InvalidTensor(format!(
                "normalize_rows needs rank 1 or 2, got {:?}",
                t.shape()
            )));
        }
        let mut out = t.clone();
        let mut norms = Vec::with_capacity(t.rows());
        for r in 0..t.rows() {
            let row = out.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::NonFinite(format!("normalize_rows: row {r} has zero norm")));
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let rg = self.rg(&[a]);
        self.push(out, OpKind::NormalizeRows, Op::NormalizeRows(a.0, norms), rg)
    }

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = &self.node(root).value;
        if rv.numel() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::ones(rv.shape()));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if node.kind == OpKind::Parameter {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }

        let mut out = Gradients::default();
        for (idx, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if self.nodes[idx].kind == OpKind::Parameter {
                    out.grads.insert(idx, g);
                }
            }
        }
        Ok(out)
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |i: usize| &self.nodes[i].value;
        let wants = |i: usize| self.nodes[i].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (bc, _) = broadcast_kind("add", ta, tb).expect("checked at construction");
                if wants(*a) {
                    let ga = reduce_to(g, ta, matches!(bc, Broadcast::LhsScalar | Broadcast::LhsRow), bc == Broadcast::LhsRow);
                    accumulate(grads, *a, ga);
                }
                if wants(*b) {
                    let gb = reduce_to(g, tb, matches!(bc, Broadcast::RhsScalar | Broadcast::RhsRow), bc == Broadcast::RhsRow);
                    accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (bc, shape) = broadcast_kind("mul", ta, tb).expect("checked at construction");
                if wants(*a) {
                    // g * b, broadcast to the output shape, then reduced to a's shape.
                    let full = match bc {
                        Broadcast::LhsScalar | Broadcast::LhsRow => elementwise(g, tb, Broadcast::Same, shape.clone(), |x, y| x * y),
                        _ => elementwise(g, tb, bc, shape.clone(), |x, y| x * y),
                    };
                    let ga = reduce_to(&full, ta, matches!(bc, Broadcast::LhsScalar | Broadcast::LhsRow), bc == Broadcast::LhsRow);
                    accumulate(grads, *a, ga);
                }
                if wants(*b) {
                    let full = match bc {
                        Broadcast::RhsScalar | Broadcast::RhsRow => elementwise(g, ta, Broadcast::Same, shape, |x, y| x * y),
                        Broadcast::LhsScalar => elementwise(g, ta, Broadcast::RhsScalar, shape, |x, y| x * y),
                        Broadcast::LhsRow => elementwise(g, ta, Broadcast::RhsRow, shape, |x, y| x * y),
                        Broadcast::Same => elementwise(g, ta, Broadcast::Same, shape, |x, y| x * y),
                    };
                    let gb = reduce_to(&full, tb, matches!(bc, Broadcast::RhsScalar | Broadcast::RhsRow), bc == Broadcast::RhsRow);
                    accumulate(grads, *b, gb);
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if wants(*a) {
                    // dA = G · Bᵀ
                    let mut out = vec![0.0; m * k];
                    gemm(m, n, k, Operand::new(g.data(), n, false), Operand::new(tb.data(), n, true), &mut out, 0.0);
                    accumulate(grads, *a, Tensor::from_parts(vec![m, k], out));
                }
                if wants(*b) {
                    // dB = Aᵀ · G
                    let mut out = vec![0.0; k * n];
                    gemm(k, m, n, Operand::new(ta.data(), k, true), Operand::new(g.data(), n, false), &mut out, 0.0);
                    accumulate(grads, *b, Tensor::from_parts(vec![k, n], out));
                }
            }
            Op::Concat(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let tp = val(p);
                    let c = tp.cols();
                    if wants(p) {
                        let mut data = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            data.extend_from_slice(&g.data()[r * total + offset..r * total + offset + c]);
                        }
                        accumulate(grads, p, Tensor::from_parts(tp.shape().to_vec(), data));
                    }
                    offset += c;
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    accumulate(grads, *a, Tensor::full(val(*a).shape(), g.data()[0]));
                }
            }
            Op::Mean(a) => {
                if wants(*a) {
                    let t = val(*a);
                    accumulate(grads, *a, Tensor::full(t.shape(), g.data()[0] / t.numel() as f64));
                }
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let c = 2.0 * g.data()[0] / ta.numel() as f64;
                let diff = ta.zip_with(tb, |x, y| c * (x - y)).expect("checked at construction");
                if wants(*b) {
                    accumulate(grads, *b, diff.scale(-1.0));
                }
                if wants(*a) {
                    accumulate(grads, *a, diff);
                }
            }
            Op::Tanh(a) => {
                if wants(*a) {
                    let ga = node.value.zip_with(g, |y, gy| gy * (1.0 - y * y)).expect("same shape");
                    accumulate(grads, *a, ga);
                }
            }
            Op::Silu(a) => {
                if wants(*a) {
                    let ga = val(*a)
                        .zip_with(g, |x, gy| {
                            let s = sigmoid(x);
                            gy * s * (1.0 + x * (1.0 - s))
                        })
                        .expect("same shape");
                    accumulate(grads, *a, ga);
                }
            }
            Op::Scale(a, s) => {
                if wants(*a) {
                    accumulate(grads, *a, g.scale(*s));
                }
            }
            Op::NormalizeRows(a, norms) => {
                if wants(*a) {
                    let y = &node.value;
                    let mut out = g.clone();
                    for (r, &n) in norms.iter().enumerate() {
                        let yr = y.row(r);
                        let dot: f64 = yr.iter().zip(g.row(r)).map(|(p, q)| p * q).sum();
                        for (o, &yv) in out.row_mut(r).iter_mut().zip(yr) {
                            *o = (*o - yv * dot) / n;
                        }
                    }
                    accumulate(grads, *a, out);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
    match &mut grads[idx] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Compares reverse-mode gradients with central finite differences.
///
/// `f` builds a scalar loss from parameter handles. Returns the maximum over
/// coordinates of `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::arg("grad_check eps must be positive"));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.parameter(p.clone())).collect();
        let root = f(&mut g, &vars)?;
        g.value(root)
            .item()
            .ok_or_else(|| Error::NonScalarRoot(g.value(root).shape().to_vec()))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.parameter(p.clone())).collect();
    let root = f(&mut g, &vars)?;
    let grads = g.backward(root)?;

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, v) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(params[pi].shape());
        let analytic = grads.get(*v).unwrap_or(&zeros);
        for ci in 0..params[pi].numel() {
            let orig = params[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[ci] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[ci] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[ci];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        t(shape, &(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
    }

    #[test]
    fn forward_examples() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[3.0, 4.0]));
        let s = g.add(a, b).unwrap();
        assert_eq!(g.forward(s).data(), &[4.0, 6.0]);

        let m = t(&[2, 2], &[0.3, -1.0, 2.5, 7.0]);
        let i = g.constant(Tensor::eye(2));
        let mv = g.constant(m.clone());
        let p = g.matmul(i, mv).unwrap();
        assert_eq!(g.forward(p), m);

        let ones = g.constant(t(&[2], &[1.0, 1.0]));
        let zeros = g.constant(t(&[2], &[0.0, 0.0]));
        let l = g.mse(ones, zeros).unwrap();
        assert_eq!(g.forward(l).item(), Some(1.0));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
        let c = g.constant(Tensor::zeros(&[3, 2]));
        let err = g.add(a, c).unwrap_err();
        assert!(err.to_string().contains("add") && err.to_string().contains("[3, 2]"));
        // a column vector is not an allowed broadcast
        let col = g.constant(Tensor::zeros(&[2, 1]));
        assert!(g.mul(a, col).is_err());
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.parameter(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), Some(6.0));
    }

    #[test]
    fn matmul_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a_val = random(&mut rng, &[3, 4]);
        let b_val = random(&mut rng, &[4, 2]);
        let mut g = Graph::new();
        let a = g.parameter(a_val);
        let b = g.parameter(b_val.clone());
        let p = g.matmul(a, b).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        let expected = Tensor::ones(&[3, 2]).matmul(&b_val.transpose().unwrap()).unwrap();
        assert!(grads.get(a).unwrap().max_abs_diff(&expected) < 1e-14);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = g.parameter(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.parameter(Tensor::scalar(2.0));
        let c = g.constant(Tensor::scalar(5.0));
        let y = g.mul(x, c).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads.get(x).unwrap().item(), Some(5.0));
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn detach_stops_gradient() {
        let mut g = Graph::new();
        let x = g.parameter(Tensor::scalar(2.0));
        let y = g.mul(x, x).unwrap();
        let d = g.detach(y);
        let z = g.mul(d, x).unwrap();
        let grads = g.backward(z).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), Some(4.0));
    }

    #[test]
    fn grad_check_examples() {
        let x = t(&[3], &[0.5, -2.0, 4.0]);
        let err = grad_check(|g, p| g.sum(p[0]), &[x], 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");

        let x = t(&[2], &[1.0, 2.0]);
        let cube = |g: &mut Graph, p: &[Var]| {
            let sq = g.mul(p[0], p[0])?;
            let c = g.mul(sq, p[0])?;
            g.sum(c)
        };
        let mut g = Graph::new();
        let v = g.parameter(x.clone());
        let root = cube(&mut g, &[v]).unwrap();
        assert_eq!(g.backward(root).unwrap().get(v).unwrap().data(), &[3.0, 12.0]);
        assert!(grad_check(cube, &[x], 1e-5).unwrap() < 1e-6);
    }

    fn mlp_loss(g: &mut Graph, p: &[Var], x: Var, y: Var) -> Result<Var> {
        let h = g.matmul(x, p[0])?;
        let h = g.add(h, p[1])?;
        let h = g.silu(h)?;
        let o = g.matmul(h, p[2])?;
        let o = g.add(o, p[3])?;
        let o = g.tanh(o)?;
        g.mse(o, y)
    }

    #[test]
    fn two_layer_mlp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&mut rng, &[5, 3]);
        let y = random(&mut rng, &[5, 2]);
        let params = vec![
            random(&mut rng, &[3, 8]),
            random(&mut rng, &[8]),
            random(&mut rng, &[8, 2]),
            random(&mut rng, &[1, 2]),
        ];
        let err = grad_check(
            |g, p| {
                let xv = g.constant(x.clone());
                let yv = g.constant(y.clone());
                mlp_loss(g, p, xv, yv)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    /// Every primitive, including both broadcast orientations, against
    /// central differences over 100 seeds.
    #[test]
    fn primitives_match_finite_differences() {
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = vec![
                random(&mut rng, &[3, 4]),
                random(&mut rng, &[4]),
                random(&mut rng, &[4, 2]),
                random(&mut rng, &[]),
                random(&mut rng, &[3, 4]),
                random(&mut rng, &[3, 2]),
            ];
            let err = grad_check(
                |g, p| {
                    let a = g.add(p[0], p[1])?; // row broadcast
                    let a2 = g.add(p[1], p[0])?; // lhs row broadcast
                    let b = g.mul(a, p[4])?;
                    let b2 = g.mul(p[1], a2)?;
                    let b = g.add(b, b2)?;
                    let c = g.mul(b, p[3])?; // scalar broadcast
                    let c2 = g.mul(p[3], c)?;
                    let d = g.tanh(c2)?;
                    let e = g.silu(b)?;
                    let f = g.concat(&[d, e])?;
                    let n = g.normalize_rows(f)?;
                    let m = g.matmul(a, p[2])?;
                    let cat = g.concat(&[m, p[5]])?;
                    let s1 = g.sum(n)?;
                    let s2 = g.mean(cat)?;
                    let s3 = g.mse(m, p[5])?;
                    let s = g.add(s1, s2)?;
                    let s = g.add(s, s3)?;
                    let s3b = g.scale(s3, -0.7)?;
                    g.add(s, s3b)
                },
                &params,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn normalize_rows_rejects_zero_rows() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[2, 2]));
        assert!(g.normalize_rows(z).is_err());
    }

    proptest! {
        #[test]
        fn gradient_is_linear_in_the_loss(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = random(&mut rng, &[3, 2]);
            let x = random(&mut rng, &[4, 3]);
            let loss_a = |g: &mut Graph, w: Var| -> Result<Var> {
                let xv = g.constant(x.clone());
                let h = g.matmul(xv, w)?;
                let h = g.tanh(h)?;
                g.sum(h)
            };
            let loss_b = |g: &mut Graph, w: Var| -> Result<Var> {
                let xv = g.constant(x.clone());
                let h = g.matmul(xv, w)?;
                let h = g.silu(h)?;
                g.mean(h)
            };
            let grad_of = |which: u8| {
                let mut g = Graph::new();
                let wv = g.parameter(w.clone());
                let root = match which {
                    0 => loss_a(&mut g, wv).unwrap(),
                    1 => loss_b(&mut g, wv).unwrap(),
                    _ => {
                        let a = loss_a(&mut g, wv).unwrap();
                        let b = loss_b(&mut g, wv).unwrap();
                        g.add(a, b).unwrap()
                    }
                };
                g.backward(root).unwrap().take(wv).unwrap()
            };
            let sum = grad_of(0).zip_with(&grad_of(1), |a, b| a + b).unwrap();
            prop_assert!(sum.max_abs_diff(&grad_of(2)) < 1e-12);
        }

        #[test]
        fn forward_is_deterministic(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = random(&mut rng, &[5, 3]);
            let x = random(&mut rng, &[7, 5]);
            let run = || {
                let mut g = Graph::new();
                let xv = g.constant(x.clone());
                let wv = g.parameter(w.clone());
                let h = g.matmul(xv, wv).unwrap();
                let h = g.silu(h).unwrap();
                g.forward(h)
            };
            let (a, b) = (run(), run());
            prop_assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }
}
