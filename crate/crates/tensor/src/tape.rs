//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value to the [`Tape`].
//! Nodes are only ever appended, so the tape is in topological order by
//! construction and [`Tape::backward`] is a single reverse sweep.

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::kernels::{self, AttentionLayout};
use crate::tensor::{matrix_dims, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation with a hand-written vector-Jacobian product, for plugging
/// primitives into the tape without extending [`Op`].
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &str;

    /// Gradient with respect to each input, given the upstream gradient of
    /// the output.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Vec<f64>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Silu(Var),
    Relu(Var),
    Abs(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax(Var),
    GatherRows { src: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SumAll(Var),
    SumRows(Var),
    Reshape(Var),
    Attention(Box<AttentionNode>),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

struct AttentionNode {
    q: Var,
    k: Var,
    v: Var,
    modulation: Option<Var>,
    layout: Arc<AttentionLayout>,
    probs: Vec<f64>,
}

impl Op {
    fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Silu(..) => "silu",
            Op::Relu(..) => "relu",
            Op::Abs(..) => "abs",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(..) => "softmax",
            Op::GatherRows { .. } => "gather_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::SumAll(..) => "sum",
            Op::SumRows(..) => "sum_rows",
            Op::Reshape(..) => "reshape",
            Op::Attention(..) => "attention",
            Op::Custom { op, .. } => op.name(),
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Silu(a)
            | Op::Relu(a)
            | Op::Abs(a)
            | Op::Softmax(a)
            | Op::SumAll(a)
            | Op::SumRows(a)
            | Op::Reshape(a) => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::GatherRows { src, .. } => vec![*src],
            Op::ConcatRows(v) => v.clone(),
            Op::SliceCols { x, .. } => vec![*x],
            Op::Attention(n) => {
                let mut v = vec![n.q, n.k, n.v];
                v.extend(n.modulation);
                v
            }
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of primitive operations and their outputs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Records a trainable input whose gradient is collected by [`Tape::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    pub fn leaf(&mut self, mut t: Tensor, requires_grad: bool) -> Var {
        t.set_requires_grad(requires_grad);
        self.nodes.push(Node { value: t, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Name of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> &str {
        self.nodes[v.0].op.name()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        matrix_dims(self.shape(v))
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { op: op.name().to_string() });
        }
        let requires_grad = op.inputs().iter().any(|&i| self.requires_grad(i));
        let mut value = Tensor::from_parts(shape, data);
        value.set_requires_grad(requires_grad);
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    /// Matrix product of `a[m×k]` and `b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 || self.shape(b).len() > 2 {
            return Err(TensorError::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.data(a), self.data(b), &mut out, m, k, n);
        let shape = if self.shape(a).len() == 1 { vec![n] } else { vec![m, n] };
        self.push(shape, out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        self.push(self.shape(a).to_vec(), out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        self.push(self.shape(a).to_vec(), out, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        self.push(self.shape(a).to_vec(), out, Op::Mul(a, b))
    }

    /// Adds the vector `row[n]` to every row of `a[m×n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.value(row).numel() != n {
            return Err(TensorError::shape(
                "add_row",
                format!("{:?} + row {:?}", self.shape(a), self.shape(row)),
            ));
        }
        let r = self.data(row);
        let mut out = self.data(a).to_vec();
        for i in 0..m {
            for (o, x) in out[i * n..(i + 1) * n].iter_mut().zip(r) {
                *o += x;
            }
        }
        self.push(self.shape(a).to_vec(), out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.data(a).iter().map(|x| x * c).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.data(a).iter().map(|x| x + c).collect();
        self.push(self.shape(a).to_vec(), out, Op::AddScalar(a))
    }

    /// Elementwise `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| x * kernels::sigmoid(x)).collect();
        self.push(self.shape(a).to_vec(), out, Op::Silu(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        self.push(self.shape(a).to_vec(), out, Op::Relu(a))
    }

    /// Elementwise absolute value; the subgradient at zero is taken as zero.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = self.data(a).iter().map(|x| x.abs()).collect();
        self.push(self.shape(a).to_vec(), out, Op::Abs(a))
    }

    /// Row-wise layer normalisation (population variance) with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(TensorError::shape(
                "layer_norm",
                format!("input {:?}, gain {:?}, bias {:?}", self.shape(x), self.shape(gain), self.shape(bias)),
            ));
        }
        if n == 0 || eps <= 0.0 {
            return Err(TensorError::shape("layer_norm", "needs width >= 1 and eps > 0"));
        }
        let (out, xhat, rstd) =
            kernels::layer_norm_forward(self.data(x), self.data(gain), self.data(bias), m, n, eps);
        self.push(self.shape(x).to_vec(), out, Op::LayerNorm { x, gain, bias, xhat, rstd })
    }

    /// Row-wise softmax. `mask[i] == false` excludes element `i` (same length as `x`).
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.dims(x);
        if let Some(mk) = mask {
            if mk.len() != m * n {
                return Err(TensorError::shape("softmax", "mask length differs from input"));
            }
        }
        let out = kernels::softmax_rows(self.data(x), mask, m, n)?;
        self.push(self.shape(x).to_vec(), out, Op::Softmax(x))
    }

    /// Selects rows of `src[m×n]` by index (repeats allowed).
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(src);
        let mut out = Vec::with_capacity(idx.len() * n);
        let data = self.data(src);
        for &i in idx {
            if i >= m {
                return Err(TensorError::shape("gather_rows", format!("row {i} of {m}")));
            }
            out.extend_from_slice(&data[i * n..(i + 1) * n]);
        }
        self.push(vec![idx.len(), n], out, Op::GatherRows { src, idx: idx.to_vec() })
    }

    /// Stacks matrices (or vectors, as single rows) with equal width.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::shape("concat_rows", "no inputs"));
        };
        let n = self.dims(first).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (m, c) = self.dims(p);
            if c != n {
                return Err(TensorError::shape("concat_rows", format!("width {c} vs {n}")));
            }
            rows += m;
            out.extend_from_slice(self.data(p));
        }
        self.push(vec![rows, n], out, Op::ConcatRows(parts.to_vec()))
    }

    /// Columns `start..start+len` of every row.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start + len > n {
            return Err(TensorError::shape("slice_cols", format!("{start}+{len} > {n}")));
        }
        let data = self.data(x);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&data[i * n + start..i * n + start + len]);
        }
        let shape = if self.shape(x).len() == 1 { vec![len] } else { vec![m, len] };
        self.push(shape, out, Op::SliceCols { x, start })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().sum();
        self.push(vec![], vec![s], Op::SumAll(a))
    }

    /// Sum of each row: `[m×n] -> [m]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let data = self.data(a);
        let out = (0..m).map(|i| data[i * n..(i + 1) * n].iter().sum()).collect();
        self.push(vec![m], out, Op::SumRows(a))
    }

    /// Same values under a new shape with the same number of elements.
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).numel() {
            return Err(TensorError::shape("reshape", format!("{:?} -> {shape:?}", self.shape(a))));
        }
        let data = self.data(a).to_vec();
        self.push(shape, data, Op::Reshape(a))
    }

    /// Block-diagonal multi-head attention with optional per-pair diagonal
    /// modulation of the query-key product (see [`AttentionLayout`]).
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        modulation: Option<Var>,
        layout: Arc<AttentionLayout>,
    ) -> Result<Var> {
        let (rows, d) = self.dims(q);
        if self.shape(k) != self.shape(q) || self.shape(v) != self.shape(q) {
            return Err(TensorError::shape("attention", "q, k, v shapes differ"));
        }
        let mod_rows = match modulation {
            Some(m) => {
                let (mr, md) = self.dims(m);
                if md != d {
                    return Err(TensorError::shape("attention", "modulation width differs from d"));
                }
                Some(mr)
            }
            None => None,
        };
        layout.validate(rows, d, mod_rows)?;
        let (out, probs) = kernels::attention_forward(
            self.data(q),
            self.data(k),
            self.data(v),
            modulation.map(|m| self.data(m)),
            d,
            &layout,
        )?;
        let node = AttentionNode { q, k, v, modulation, layout, probs };
        self.push(vec![rows, d], out, Op::Attention(Box::new(node)))
    }

    /// Records the output of a custom primitive.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        let shape = output.shape().to_vec();
        let data = output.into_data();
        self.push(shape, data, Op::Custom { inputs: inputs.to_vec(), op })
    }

    /// Reverse sweep from a scalar `loss`. Gradients are added into the grad
    /// slot of every node that requires one, so repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NotScalar { shape: self.shape(loss).to_vec() });
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            if !self.nodes[idx].value.requires_grad() {
                continue;
            }
            let contributions = self.vjp(idx, &g);
            for (input, delta) in contributions {
                if !self.nodes[input.0].value.requires_grad() {
                    continue;
                }
                match &mut adj[input.0] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(delta),
                }
            }
            self.nodes[idx].value.accumulate_grad(&g);
        }
        for n in &mut self.nodes {
            if n.value.requires_grad() {
                n.value.ensure_grad();
            }
        }
        Ok(())
    }

    fn vjp(&self, idx: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; k * n];
                if self.requires_grad(*a) {
                    kernels::matmul_bt_acc(g, self.data(*b), &mut da, m, n, k);
                }
                if self.requires_grad(*b) {
                    kernels::matmul_at_acc(self.data(*a), g, &mut db, m, k, n);
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|x| -x).collect())],
            Op::Mul(a, b) => {
                let da = g.iter().zip(self.data(*b)).map(|(x, y)| x * y).collect();
                let db = g.iter().zip(self.data(*a)).map(|(x, y)| x * y).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::AddRow(a, row) => {
                let (m, n) = self.dims(*a);
                let mut dr = vec![0.0; n];
                for i in 0..m {
                    for (d, x) in dr.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                        *d += x;
                    }
                }
                vec![(*a, g.to_vec()), (*row, dr)]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|x| x * c).collect())],
            Op::AddScalar(a) => vec![(*a, g.to_vec())],
            Op::Silu(a) => {
                let d = self
                    .data(*a)
                    .iter()
                    .zip(g)
                    .map(|(&x, gy)| {
                        let s = kernels::sigmoid(x);
                        gy * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                vec![(*a, d)]
            }
            Op::Relu(a) => {
                let d = self.data(*a).iter().zip(g).map(|(&x, gy)| if x > 0.0 { *gy } else { 0.0 }).collect();
                vec![(*a, d)]
            }
            Op::Abs(a) => {
                let d = self
                    .data(*a)
                    .iter()
                    .zip(g)
                    .map(|(&x, gy)| {
                        if x > 0.0 {
                            *gy
                        } else if x < 0.0 {
                            -gy
                        } else {
                            0.0
                        }
                    })
                    .collect();
                vec![(*a, d)]
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (m, n) = self.dims(*x);
                let (dx, dg, db) = kernels::layer_norm_backward(g, xhat, rstd, self.data(*gain), m, n);
                vec![(*x, dx), (*gain, dg), (*bias, db)]
            }
            Op::Softmax(x) => {
                let (m, n) = self.dims(*x);
                vec![(*x, kernels::softmax_rows_backward(out.data(), g, m, n))]
            }
            Op::GatherRows { src, idx } => {
                let (m, n) = self.dims(*src);
                let mut d = vec![0.0; m * n];
                for (r, &i) in idx.iter().enumerate() {
                    for (a, b) in d[i * n..(i + 1) * n].iter_mut().zip(&g[r * n..(r + 1) * n]) {
                        *a += b;
                    }
                }
                vec![(*src, d)]
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let len = self.value(p).numel();
                        let d = g[off..off + len].to_vec();
                        off += len;
                        (p, d)
                    })
                    .collect()
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.dims(*x);
                let len = out.dims2().1;
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    d[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                vec![(*x, d)]
            }
            Op::SumAll(a) => vec![(*a, vec![g[0]; self.value(*a).numel()])],
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::SumRows(a) => {
                let (m, n) = self.dims(*a);
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    d[i * n..(i + 1) * n].iter_mut().for_each(|x| *x = g[i]);
                }
                vec![(*a, d)]
            }
            Op::Attention(node) => {
                let d = self.dims(node.q).1;
                let (dq, dk, dv, dm) = kernels::attention_backward(
                    self.data(node.q),
                    self.data(node.k),
                    self.data(node.v),
                    node.modulation.map(|m| self.data(m)),
                    &node.probs,
                    g,
                    d,
                    &node.layout,
                );
                let mut v = vec![(node.q, dq), (node.k, dk), (node.v, dv)];
                if let (Some(m), Some(dm)) = (node.modulation, dm) {
                    v.push((m, dm));
                }
                v
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
                inputs.iter().copied().zip(op.backward(&ins, out, g)).collect()
            }
        }
    }
}
