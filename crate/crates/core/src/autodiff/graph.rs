//! Append-only computation graph with a single reverse sweep.
//!
//! Every recorded node stores its output value, its operands and the kind of
//! operation that produced it. Operands always precede their consumers, so the
//! append order is a topological order and `backward` walks it in reverse,
//! visiting each node once.

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::objective::PROB_EPSILON;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable operations understood by the graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    /// `[m, k] x [k, n] -> [m, n]`
    MatMul,
    /// `[m, n] + [n]` broadcast over rows.
    AddBias,
    Relu,
    /// Row-wise log-softmax of a `[m, n]` tensor.
    LogSoftmax,
    /// Elementwise product of equal shapes.
    Mul,
    Add,
    Sub,
    Square,
    /// Sum of all entries, scalar result.
    Sum,
    /// Mean of all entries, scalar result.
    Mean,
    /// Multiplication by a fixed constant.
    Scale(f64),
    Exp,
    /// Natural log of `max(x, 1e-12)`.
    Ln,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::AddBias => "add-bias",
            OpKind::Relu => "relu",
            OpKind::LogSoftmax => "log-softmax",
            OpKind::Mul => "mul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Square => "square",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Scale(_) => "scale",
            OpKind::Exp => "exp",
            OpKind::Ln => "ln",
        }
    }

    fn arity(self) -> usize {
        match self {
            OpKind::MatMul | OpKind::AddBias | OpKind::Mul | OpKind::Add | OpKind::Sub => 2,
            _ => 1,
        }
    }
}

#[derive(Debug)]
enum Origin {
    Leaf,
    Constant,
    Op { kind: OpKind, operands: [Var; 2] },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    origin: Origin,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every leaf of the graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf. Leaves the root does not depend on get zeros.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
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

    /// Registers a differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Origin::Leaf, true)
    }

    /// Registers a constant that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Origin::Constant, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, origin: Origin, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            origin,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, var: Var) -> Result<&Node> {
        self.nodes.get(var.0).ok_or(Error::UnknownNode(var.0))
    }

    /// Evaluates `kind` on `operands` and appends the result.
    pub fn record(&mut self, kind: OpKind, operands: &[Var]) -> Result<Var> {
        if operands.len() != kind.arity() {
            return Err(Error::Arity {
                op: kind.name(),
                expected: kind.arity(),
                got: operands.len(),
            });
        }
        for &v in operands {
            self.node(v)?;
        }
        let a = &self.nodes[operands[0].0].value;
        let b = operands.get(1).map(|v| &self.nodes[v.0].value);
        let value = forward(kind, a, b)?;
        if !value.is_finite() {
            return Err(Error::NonFinite { op: kind.name() });
        }
        let requires_grad = operands.iter().any(|v| self.nodes[v.0].requires_grad);
        let pair = [operands[0], *operands.get(1).unwrap_or(&operands[0])];
        Ok(self.push(
            value,
            Origin::Op {
                kind,
                operands: pair,
            },
            requires_grad,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::MatMul, &[a, b])
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.record(OpKind::AddBias, &[a, bias])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Relu, &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::LogSoftmax, &[a])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::Mul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::Sub, &[a, b])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Square, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Sum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Mean, &[a])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.record(OpKind::Scale(factor), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Exp, &[a])
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Ln, &[a])
    }

    /// Sum of several same-shape tensors.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars.split_first().ok_or(Error::Empty("add_all operands"))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_node = self.node(root)?;
        if !root_node.value.is_scalar() {
            return Err(Error::NonScalarRoot(root_node.value.shape().to_vec()));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            let Origin::Op { kind, operands } = node.origin else {
                continue;
            };
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let operands = &operands[..kind.arity()];
            let needs: Vec<bool> = operands
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let a = &self.nodes[operands[0].0].value;
            let b = operands.get(1).map(|v| &self.nodes[v.0].value);
            let local = local_grads(kind, a, b, &node.value, &upstream, &needs);
            for (slot, contribution) in operands.iter().zip(local) {
                if let Some(c) = contribution {
                    accumulate(&mut grads[slot.0], c);
                }
            }
        }

        let mut out = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            if !matches!(node.origin, Origin::Leaf) {
                out.push(None);
                continue;
            }
            let values = grads
                .get_mut(idx)
                .and_then(Option::take)
                .unwrap_or_else(|| vec![0.0; node.value.len()]);
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "backward" });
            }
            out.push(Some(Tensor::new(node.value.shape().to_vec(), values)?));
        }
        Ok(Gradients { grads: out })
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(existing) => existing
            .iter_mut()
            .zip(contribution)
            .for_each(|(e, c)| *e += c),
        None => *slot = Some(contribution),
    }
}

fn mismatch(kind: OpKind, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op: kind.name(),
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn rank2(kind: OpKind, a: &Tensor) -> Result<(usize, usize)> {
    a.dims2().ok_or_else(|| Error::ShapeMismatch {
        op: kind.name(),
        lhs: a.shape().to_vec(),
        rhs: Vec::new(),
    })
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(a.shape().to_vec(), a.values().iter().map(|&x| f(x)).collect())
        .expect("shape preserved")
}

fn zip(kind: OpKind, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(mismatch(kind, a, b));
    }
    let values = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), values)
}

fn forward(kind: OpKind, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    match kind {
        OpKind::MatMul => {
            let b = b.expect("arity checked");
            let (m, k) = rank2(kind, a)?;
            let (k2, n) = b.dims2().ok_or_else(|| mismatch(kind, a, b))?;
            if k != k2 {
                return Err(mismatch(kind, a, b));
            }
            let (av, bv) = (a.values(), b.values());
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let row = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = av[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    for (o, &bpj) in row.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                        *o += aip * bpj;
                    }
                }
            }
            Tensor::matrix(m, n, out)
        }
        OpKind::AddBias => {
            let b = b.expect("arity checked");
            let (m, n) = rank2(kind, a)?;
            if b.len() != n || b.shape().len() != 1 {
                return Err(mismatch(kind, a, b));
            }
            let mut out = a.values().to_vec();
            for row in out.chunks_mut(n.max(1)).take(m) {
                row.iter_mut().zip(b.values()).for_each(|(o, &c)| *o += c);
            }
            Tensor::matrix(m, n, out)
        }
        OpKind::Relu => Ok(map(a, |x| x.max(0.0))),
        OpKind::LogSoftmax => {
            let (m, n) = rank2(kind, a)?;
            let mut out = Vec::with_capacity(m * n);
            for r in 0..m {
                let row = a.row(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
                out.extend(row.iter().map(|&x| x - lse));
            }
            Tensor::matrix(m, n, out)
        }
        OpKind::Mul => zip(kind, a, b.expect("arity checked"), |x, y| x * y),
        OpKind::Add => zip(kind, a, b.expect("arity checked"), |x, y| x + y),
        OpKind::Sub => zip(kind, a, b.expect("arity checked"), |x, y| x - y),
        OpKind::Square => Ok(map(a, |x| x * x)),
        OpKind::Sum => Ok(Tensor::scalar(a.values().iter().sum())),
        OpKind::Mean => {
            if a.is_empty() {
                return Err(Error::Empty("mean of empty tensor"));
            }
            Ok(Tensor::scalar(a.values().iter().sum::<f64>() / a.len() as f64))
        }
        OpKind::Scale(c) => Ok(map(a, |x| c * x)),
        OpKind::Exp => Ok(map(a, f64::exp)),
        OpKind::Ln => Ok(map(a, |x| x.max(PROB_EPSILON).ln())),
    }
}

/// Per-operand gradient contributions; `None` where the operand needs none.
fn local_grads(
    kind: OpKind,
    a: &Tensor,
    b: Option<&Tensor>,
    out: &Tensor,
    up: &[f64],
    needs: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let need_a = needs[0];
    let need_b = needs.get(1).copied().unwrap_or(false);
    let av = a.values();
    match kind {
        OpKind::MatMul => {
            let b = b.expect("binary");
            let (m, k) = a.dims2().expect("checked in forward");
            let n = b.shape()[1];
            let bv = b.values();
            let da = need_a.then(|| {
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    let up_row = &up[i * n..(i + 1) * n];
                    for p in 0..k {
                        let b_row = &bv[p * n..(p + 1) * n];
                        da[i * k + p] = up_row.iter().zip(b_row).map(|(u, w)| u * w).sum();
                    }
                }
                da
            });
            let db = need_b.then(|| {
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    let up_row = &up[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = av[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        for (d, &u) in db[p * n..(p + 1) * n].iter_mut().zip(up_row) {
                            *d += aip * u;
                        }
                    }
                }
                db
            });
            vec![da, db]
        }
        OpKind::AddBias => {
            let n = b.expect("binary").len();
            let db = need_b.then(|| {
                let mut db = vec![0.0; n];
                for row in up.chunks(n.max(1)) {
                    db.iter_mut().zip(row).for_each(|(d, &u)| *d += u);
                }
                db
            });
            vec![need_a.then(|| up.to_vec()), db]
        }
        OpKind::Relu => vec![need_a.then(|| {
            av.iter()
                .zip(up)
                .map(|(&x, &u)| if x > 0.0 { u } else { 0.0 })
                .collect()
        })],
        OpKind::LogSoftmax => vec![need_a.then(|| {
            let (m, n) = out.dims2().expect("rank 2");
            let mut da = Vec::with_capacity(m * n);
            for r in 0..m {
                let y = out.row(r);
                let u = &up[r * n..(r + 1) * n];
                let total: f64 = u.iter().sum();
                da.extend(y.iter().zip(u).map(|(&yi, &ui)| ui - yi.exp() * total));
            }
            da
        })],
        OpKind::Mul => {
            let bv = b.expect("binary").values();
            vec![
                need_a.then(|| up.iter().zip(bv).map(|(u, y)| u * y).collect()),
                need_b.then(|| up.iter().zip(av).map(|(u, x)| u * x).collect()),
            ]
        }
        OpKind::Add => vec![need_a.then(|| up.to_vec()), need_b.then(|| up.to_vec())],
        OpKind::Sub => vec![
            need_a.then(|| up.to_vec()),
            need_b.then(|| up.iter().map(|u| -u).collect()),
        ],
        OpKind::Square => {
            vec![need_a.then(|| av.iter().zip(up).map(|(x, u)| 2.0 * x * u).collect())]
        }
        OpKind::Sum => vec![need_a.then(|| vec![up[0]; av.len()])],
        OpKind::Mean => vec![need_a.then(|| vec![up[0] / av.len() as f64; av.len()])],
        OpKind::Scale(c) => vec![need_a.then(|| up.iter().map(|u| c * u).collect())],
        OpKind::Exp => vec![need_a.then(|| {
            out.values().iter().zip(up).map(|(y, u)| y * u).collect()
        })],
        OpKind::Ln => vec![need_a.then(|| {
            av.iter()
                .zip(up)
                .map(|(&x, &u)| if x > PROB_EPSILON { u / x } else { 0.0 })
                .collect()
        })],
    }
}
