//! Dense-tensor reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles and
//! replays them in reverse to accumulate gradients. Values are row-major
//! `f64` throughout; broadcasting follows trailing-axis alignment (numpy
//! rules). Tensors on a tape are never mutated in place, so the recorded
//! forward values are exactly what the backward rules consume.
//!
//! Checked entry points (`try_*`) return [`TensorError`]; the plain method
//! names are thin wrappers that panic with the same message, for call sites
//! where shapes are correct by construction.

use std::cell::RefCell;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("{op}: domain error: {reason}")]
    Domain { op: &'static str, reason: String },
    #[error("masked_softmax: fully masked row (all entries -inf) at slice {slice}")]
    FullyMaskedRow { slice: usize },
    #[error("backward: loss must be scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("grad_check: program is not deterministic (two evaluations disagree: {a} vs {b})")]
    NonDeterministic { a: f64, b: f64 },
}

type Result<T> = std::result::Result<T, TensorError>;

// ---------------------------------------------------------------------------
// Broadcasting helpers (trailing-axis alignment).
// ---------------------------------------------------------------------------

fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0usize; ndim];
    for i in 0..ndim {
        let da = if i < ndim - a.len() { 1 } else { a[i - (ndim - a.len())] };
        let db = if i < ndim - b.len() { 1 } else { b[i - (ndim - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(TensorError::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() });
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Strides for reading `shape` as if expanded to `out_shape` (0 on broadcast axes).
fn expand_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let ndim = out_shape.len();
    let mut padded = vec![1usize; ndim];
    padded[ndim - shape.len()..].copy_from_slice(shape);
    let mut strides = vec![0usize; ndim];
    let mut acc = 1usize;
    for d in (0..ndim).rev() {
        strides[d] = if padded[d] == 1 { 0 } else { acc };
        acc *= padded[d];
    }
    strides
}

/// Materialize `data` (of `shape`) expanded to `out_shape`.
fn expand(data: &[f64], shape: &[usize], out_shape: &[usize]) -> Vec<f64> {
    if shape == out_shape {
        return data.to_vec();
    }
    let n = numel(out_shape);
    let strides = expand_strides(shape, out_shape);
    let ndim = out_shape.len();
    let mut out = Vec::with_capacity(n);
    let mut coords = vec![0usize; ndim];
    let mut flat = 0usize;
    for _ in 0..n {
        out.push(data[flat]);
        for d in (0..ndim).rev() {
            coords[d] += 1;
            flat += strides[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            flat -= strides[d] * out_shape[d];
        }
    }
    out
}

/// Sum `grad` (of `grad_shape`) down to `target_shape`, reversing a broadcast.
fn reduce_to_shape(grad: &[f64], grad_shape: &[usize], target_shape: &[usize]) -> Vec<f64> {
    if grad_shape == target_shape {
        return grad.to_vec();
    }
    let mut out = vec![0.0; numel(target_shape)];
    let strides = expand_strides(target_shape, grad_shape);
    let ndim = grad_shape.len();
    let mut coords = vec![0usize; ndim];
    let mut flat = 0usize;
    for &g in grad {
        out[flat] += g;
        for d in (0..ndim).rev() {
            coords[d] += 1;
            flat += strides[d];
            if coords[d] < grad_shape[d] {
                break;
            }
            coords[d] = 0;
            flat -= strides[d] * grad_shape[d];
        }
    }
    out
}

/// `out[m x n] += a[m x p] . b[p x n]`, row-major.
///
/// The k-middle loop keeps the innermost traversal over independent output
/// lanes so the compiler can vectorize it without reassociating sums.
fn matmul_acc(a: &[f64], b: &[f64], m: usize, p: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), p * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * p..(i + 1) * p];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = &b[k * n..(k + 1) * n];
            for (o, &bkj) in o_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
}

fn transpose_2d(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

fn add_assign(target: &mut [f64], src: &[f64]) {
    for (t, s) in target.iter_mut().zip(src) {
        *t += s;
    }
}

// ---------------------------------------------------------------------------
// Tape and nodes.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    MatMul { a: usize, b: usize, m: usize, p: usize, n: usize },
    Bmm { a: usize, b: usize, batch: usize, m: usize, p: usize, n: usize },
    Transpose(usize),
    Reshape(usize),
    ConcatLast(Vec<usize>),
    SumAll(usize),
    MeanAll(usize),
    SumLast(usize),
    Square(usize),
    Sqrt(usize),
    Exp(usize),
    Log(usize),
    RowL2Norm(usize),
    LogSumExpLast(usize),
    MaskedSoftmax { logits: usize, mask: usize },
    Prelu { input: usize, slope: usize },
    LayerNorm { input: usize, gamma: usize, beta: usize, eps: f64 },
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Records operations for reverse-mode differentiation.
///
/// A tape and the tensors on it are confined to one worker; independent
/// tapes may run in parallel.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a tensor on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(id={}, shape={:?})", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    fn push(&self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { shape, values, grad: None, requires_grad, op });
        Var { tape: self, id }
    }

    fn check_shape(op: &'static str, shape: &[usize], values: &[f64]) -> Result<()> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape {
                op,
                shape: shape.to_vec(),
                reason: "dimensions must be positive".into(),
            });
        }
        if numel(shape) != values.len() {
            return Err(TensorError::InvalidShape {
                op,
                shape: shape.to_vec(),
                reason: format!("shape wants {} values, got {}", numel(shape), values.len()),
            });
        }
        Ok(())
    }

    /// A tensor that does not participate in backward.
    pub fn constant(&self, values: Vec<f64>, shape: Vec<usize>) -> Var<'_> {
        Self::check_shape("constant", &shape, &values).unwrap_or_else(|e| panic!("{e}"));
        self.push(shape, values, false, Op::Leaf)
    }

    /// A learnable tensor: gradients are accumulated for it during backward.
    pub fn param(&self, values: Vec<f64>, shape: Vec<usize>) -> Var<'_> {
        Self::check_shape("param", &shape, &values).unwrap_or_else(|e| panic!("{e}"));
        self.push(shape, values, true, Op::Leaf)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.push(vec![1], vec![v], false, Op::Leaf)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Run the backward pass from a scalar loss, filling gradients for every
    /// node that requires them. Parameters unreachable from the loss keep a
    /// zero gradient.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        {
            let l = &nodes[loss.id];
            if numel(&l.shape) != 1 {
                return Err(TensorError::NonScalarLoss { shape: l.shape.clone() });
            }
        }
        let n = nodes.len();
        for node in nodes.iter_mut() {
            if node.requires_grad {
                node.grad = Some(vec![0.0; node.values.len()]);
            }
        }
        if nodes[loss.id].grad.is_none() {
            // Loss built from constants only; nothing to do.
            return Ok(());
        }
        nodes[loss.id].grad = Some(vec![1.0]);

        for id in (0..n).rev() {
            if id > loss.id || !nodes[id].requires_grad {
                continue;
            }
            let op = nodes[id].op.clone();
            let grad = match nodes[id].grad.as_ref() {
                Some(g) => g.clone(),
                None => continue,
            };
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let out_shape = nodes[id].shape.clone();
                    for &side in &[a, b] {
                        if nodes[side].requires_grad {
                            let reduced = reduce_to_shape(&grad, &out_shape, &nodes[side].shape.clone());
                            add_assign(nodes[side].grad.as_mut().unwrap(), &reduced);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    let out_shape = nodes[id].shape.clone();
                    if nodes[a].requires_grad {
                        let reduced = reduce_to_shape(&grad, &out_shape, &nodes[a].shape.clone());
                        add_assign(nodes[a].grad.as_mut().unwrap(), &reduced);
                    }
                    if nodes[b].requires_grad {
                        let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                        let reduced = reduce_to_shape(&neg, &out_shape, &nodes[b].shape.clone());
                        add_assign(nodes[b].grad.as_mut().unwrap(), &reduced);
                    }
                }
                Op::Mul(a, b) => {
                    let out_shape = nodes[id].shape.clone();
                    if nodes[a].requires_grad {
                        let b_exp = expand(&nodes[b].values, &nodes[b].shape, &out_shape);
                        let da: Vec<f64> = grad.iter().zip(&b_exp).map(|(g, v)| g * v).collect();
                        let reduced = reduce_to_shape(&da, &out_shape, &nodes[a].shape.clone());
                        add_assign(nodes[a].grad.as_mut().unwrap(), &reduced);
                    }
                    if nodes[b].requires_grad {
                        let a_exp = expand(&nodes[a].values, &nodes[a].shape, &out_shape);
                        let db: Vec<f64> = grad.iter().zip(&a_exp).map(|(g, v)| g * v).collect();
                        let reduced = reduce_to_shape(&db, &out_shape, &nodes[b].shape.clone());
                        add_assign(nodes[b].grad.as_mut().unwrap(), &reduced);
                    }
                }
                Op::Div(a, b) => {
                    let out_shape = nodes[id].shape.clone();
                    let a_exp = expand(&nodes[a].values, &nodes[a].shape, &out_shape);
                    let b_exp = expand(&nodes[b].values, &nodes[b].shape, &out_shape);
                    if nodes[a].requires_grad {
                        let da: Vec<f64> = grad.iter().zip(&b_exp).map(|(g, v)| g / v).collect();
                        let reduced = reduce_to_shape(&da, &out_shape, &nodes[a].shape.clone());
                        add_assign(nodes[a].grad.as_mut().unwrap(), &reduced);
                    }
                    if nodes[b].requires_grad {
                        let db: Vec<f64> = grad
                            .iter()
                            .zip(a_exp.iter().zip(&b_exp))
                            .map(|(g, (av, bv))| -g * av / (bv * bv))
                            .collect();
                        let reduced = reduce_to_shape(&db, &out_shape, &nodes[b].shape.clone());
                        add_assign(nodes[b].grad.as_mut().unwrap(), &reduced);
                    }
                }
                Op::AddScalar(a) => {
                    if nodes[a].requires_grad {
                        add_assign(nodes[a].grad.as_mut().unwrap(), &grad);
                    }
                }
                Op::MulScalar(a, s) => {
                    if nodes[a].requires_grad {
                        let da: Vec<f64> = grad.iter().map(|g| g * s).collect();
                        add_assign(nodes[a].grad.as_mut().unwrap(), &da);
                    }
                }
                Op::MatMul { a, b, m, p, n: nn } => {
                    if nodes[a].requires_grad {
                        let bt = transpose_2d(&nodes[b].values, p, nn);
                        let mut da = vec![0.0; m * p];
                        matmul_acc(&grad, &bt, m, nn, p, &mut da);
                        add_assign(nodes[a].grad.as_mut().unwrap(), &da);
                    }
                    if nodes[b].requires_grad {
                        let at = transpose_2d(&nodes[a].values, m, p);
                        let mut db = vec![0.0; p * nn];
                        matmul_acc(&at, &grad, p, m, nn, &mut db);
                        add_assign(nodes[b].grad.as_mut().unwrap(), &db);
                    }
                }
                Op::Bmm { a, b, batch, m, p, n: nn } => {
                    if nodes[a].requires_grad {
                        let mut da = vec![0.0; batch * m * p];
                        for t in 0..batch {
                            let bt = transpose_2d(&nodes[b].values[t * p * nn..(t + 1) * p * nn], p, nn);
                            matmul_acc(
                                &grad[t * m * nn..(t + 1) * m * nn],
                                &bt,
                                m,
                                nn,
                                p,
                                &mut da[t * m * p..(t + 1) * m * p],
                            );
                        }
                        add_assign(nodes[a].grad.as_mut().unwrap(), &da);
                    }
                    if nodes[b].requires_grad {
                        let mut db = vec![0.0; batch * p * nn];
                        for t in 0..batch {
                            let at = transpose_2d(&nodes[a].values[t * m * p..(t + 1) * m * p], m, p);
                            matmul_acc(
                                &at,
                                &grad[t * m * nn..(t + 1) * m * nn],
                                p,
                                m,
                                nn,
                                &mut db[t * p * nn..(t + 1) * p * nn],
                            );
                        }
                        add_assign(nodes[b].grad.as_mut().unwrap(), &db);
                    }
                }
                Op::Transpose(a) => {
                    if nodes[a].requires_grad {
                        let out_shape = nodes[id].shape.clone();
                        let nd = out_shape.len();
                        let (rows, cols) = (out_shape[nd - 2], out_shape[nd - 1]);
                        let leading: usize = out_shape[..nd - 2].iter().product();
                        let mut da = vec![0.0; grad.len()];
                        for t in 0..leading {
                            let g = &grad[t * rows * cols..(t + 1) * rows * cols];
                            let dst = &mut da[t * rows * cols..(t + 1) * rows * cols];
                            dst.copy_from_slice(&transpose_2d(g, rows, cols));
                        }
                        add_assign(nodes[a].grad.as_mut().unwrap(), &da);
                    }
                }
                Op::Reshape(a) => {
                    if nodes[a].requires_grad {
                        add_assign(nodes[a].grad.as_mut().unwrap(), &grad);
                    }
                }
                Op::ConcatLast(inputs) => {
                    let out_shape = nodes[id].shape.clone();
                    let out_last = *out_shape.last().unwrap();
                    let rows = numel(&out_shape) / out_last;
                    let mut offset = 0usize;
                    for &inp in &inputs {
                        let in_last = *nodes[inp].shape.last().unwrap();
                        if nodes[inp].requires_grad {
                            let mut da = vec![0.0; rows * in_last];
                            for r in 0..rows {
                                da[r * in_last..(r + 1) * in_last].copy_from_slice(
                                    &grad[r * out_last + offset..r * out_last + offset + in_last],
                                );
                            }
                            add_assign(nodes[inp].grad.as_mut().unwrap(), &da);
                        }
                        offset += in_last;
                    }
                }
                Op::SumAll(a) => {
                    if nodes[a].requires_grad {
                        let g = grad[0];
                        for t in nodes[a].grad.as_mut().unwrap().iter_mut() {
                            *t += g;
                        }
                    }
                }
                Op::MeanAll(a) => {
                    if nodes[a].requires_grad {
                        let g = grad[0] / nodes[a].values.len() as f64;
                        for t in nodes[a].grad.as_mut().unwrap().iter_mut() {
                            *t += g;
                        }
                    }
                }
                Op::SumLast(input) => {
                    if nodes[input].requires_grad {
                        let last = *nodes[input].shape.last().unwrap();
                        let da: Vec<f64> = grad.iter().flat_map(|&g| std::iter::repeat(g).take(last)).collect();
                        add_assign(nodes[input].grad.as_mut().unwrap(), &da);
                    }
                }
                Op::Square(a) => {
                    if nodes[a].requires_grad {
                        let da: Vec<f64> = grad
                            .iter()
                            .zip(&nodes[a].values)
                            .map(|(g, x)| 2.0 * g * x)
                            .collect();
                        add_assign(nodes[a].grad.as_mut().unwrap(), &da);
                    }
                }
                Op::Sqrt(a) => {
                    if nodes[a].requires_grad {
                        let da: Vec<f64> = grad
                            .iter()
                            .zip(&nodes[id].values)
                            .map(|(g, s)| g / (2.0 * s))
                            .collect();
                        add_assign(nodes[a].grad.as_mut().unwrap(), &da);
                    }
                }
                Op::Exp(a) => {
                    if nodes[a].requires_grad {
                        let da: Vec<f64> = grad
                            .iter()
                            .zip(&nodes[id].values)
                            .map(|(g, e)| g * e)
                            .collect();
                        add_assign(nodes[a].grad.as_mut().unwrap(), &da);
                    }
                }
                Op::Log(a) => {
                    if nodes[a].requires_grad {
                        let da: Vec<f64> = grad
                            .iter()
                            .zip(&nodes[a].values)
                            .map(|(g, x)| g / x)
                            .collect();
                        add_assign(nodes[a].grad.as_mut().unwrap(), &da);
                    }
                }
                Op::RowL2Norm(a) => {
                    if nodes[a].requires_grad {
                        let last = *nodes[a].shape.last().unwrap();
                        let mut da = vec![0.0; nodes[a].values.len()];
                        for (slice, &g) in grad.iter().enumerate() {
                            let norm = nodes[id].values[slice];
                            if norm > 0.0 {
                                let x = &nodes[a].values[slice * last..(slice + 1) * last];
                                for (d, xv) in da[slice * last..(slice + 1) * last].iter_mut().zip(x) {
                                    *d += g * xv / norm;
                                }
                            }
                            // Subgradient 0 at the origin.
                        }
                        add_assign(nodes[a].grad.as_mut().unwrap(), &da);
                    }
                }
                Op::LogSumExpLast(a) => {
                    if nodes[a].requires_grad {
                        let last = *nodes[a].shape.last().unwrap();
                        let mut da = vec![0.0; nodes[a].values.len()];
                        for (slice, &g) in grad.iter().enumerate() {
                            let lse = nodes[id].values[slice];
                            let x = &nodes[a].values[slice * last..(slice + 1) * last];
                            for (d, xv) in da[slice * last..(slice + 1) * last].iter_mut().zip(x) {
                                *d += g * (xv - lse).exp();
                            }
                        }
                        add_assign(nodes[a].grad.as_mut().unwrap(), &da);
                    }
                }
                Op::MaskedSoftmax { logits, mask } => {
                    let out = nodes[id].values.clone();
                    let last = *nodes[id].shape.last().unwrap();
                    let slices = out.len() / last;
                    let mut dl = vec![0.0; out.len()];
                    for s in 0..slices {
                        let o = &out[s * last..(s + 1) * last];
                        let g = &grad[s * last..(s + 1) * last];
                        let dot: f64 = o.iter().zip(g).map(|(ov, gv)| ov * gv).sum();
                        for ((d, &ov), &gv) in dl[s * last..(s + 1) * last].iter_mut().zip(o).zip(g) {
                            *d = ov * (gv - dot);
                        }
                    }
                    let out_shape = nodes[id].shape.clone();
                    if nodes[logits].requires_grad {
                        let reduced = reduce_to_shape(&dl, &out_shape, &nodes[logits].shape.clone());
                        add_assign(nodes[logits].grad.as_mut().unwrap(), &reduced);
                    }
                    if nodes[mask].requires_grad {
                        let reduced = reduce_to_shape(&dl, &out_shape, &nodes[mask].shape.clone());
                        add_assign(nodes[mask].grad.as_mut().unwrap(), &reduced);
                    }
                }
                Op::Prelu { input, slope } => {
                    let slope_len = nodes[slope].values.len();
                    let last = *nodes[input].shape.last().unwrap();
                    if nodes[input].requires_grad {
                        let da: Vec<f64> = grad
                            .iter()
                            .zip(nodes[input].values.iter().enumerate())
                            .map(|(g, (idx, &x))| {
                                if x > 0.0 {
                                    *g
                                } else {
                                    let s = if slope_len == 1 {
                                        nodes[slope].values[0]
                                    } else {
                                        nodes[slope].values[idx % last]
                                    };
                                    g * s
                                }
                            })
                            .collect();
                        add_assign(nodes[input].grad.as_mut().unwrap(), &da);
                    }
                    if nodes[slope].requires_grad {
                        let mut ds = vec![0.0; slope_len];
                        for (idx, (&g, &x)) in grad.iter().zip(&nodes[input].values).enumerate() {
                            if x <= 0.0 {
                                let j = if slope_len == 1 { 0 } else { idx % last };
                                ds[j] += g * x;
                            }
                        }
                        add_assign(nodes[slope].grad.as_mut().unwrap(), &ds);
                    }
                }
                Op::LayerNorm { input, gamma, beta, eps } => {
                    let d = *nodes[input].shape.last().unwrap();
                    let rows = nodes[input].values.len() / d;
                    let x = nodes[input].values.clone();
                    let gam = nodes[gamma].values.clone();
                    let mut dx = vec![0.0; x.len()];
                    let mut dgamma = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    for r in 0..rows {
                        let xs = &x[r * d..(r + 1) * d];
                        let gs = &grad[r * d..(r + 1) * d];
                        let mean = xs.iter().sum::<f64>() / d as f64;
                        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv_std = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = xs.iter().map(|v| (v - mean) * inv_std).collect();
                        for j in 0..d {
                            dgamma[j] += gs[j] * xhat[j];
                            dbeta[j] += gs[j];
                        }
                        let dxhat: Vec<f64> = gs.iter().zip(&gam).map(|(g, gm)| g * gm).collect();
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        let df = d as f64;
                        for j in 0..d {
                            dx[r * d + j] =
                                inv_std / df * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                    if nodes[input].requires_grad {
                        add_assign(nodes[input].grad.as_mut().unwrap(), &dx);
                    }
                    if nodes[gamma].requires_grad {
                        add_assign(nodes[gamma].grad.as_mut().unwrap(), &dgamma);
                    }
                    if nodes[beta].requires_grad {
                        add_assign(nodes[beta].grad.as_mut().unwrap(), &dbeta);
                    }
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Var operations.
// ---------------------------------------------------------------------------

macro_rules! panicking {
    ($(#[$doc:meta])* $name:ident ( $($arg:ident : $ty:ty),* ) via $checked:ident) => {
        $(#[$doc])*
        pub fn $name(self, $($arg: $ty),*) -> Var<'t> {
            self.$checked($($arg),*).unwrap_or_else(|e| panic!("{e}"))
        }
    };
}

impl<'t> Var<'t> {
    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn values(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].values.clone()
    }

    pub fn value_scalar(&self) -> f64 {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        assert_eq!(node.values.len(), 1, "value_scalar on non-scalar tensor");
        node.values[0]
    }

    /// Gradient accumulated by the last backward pass (zeros if unreachable).
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.nodes.borrow()[self.id].grad.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].values.len()
    }

    fn binary_broadcast(
        self,
        rhs: Var<'t>,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(usize, usize) -> Op,
    ) -> Result<Var<'t>> {
        let (out_shape, values, rg);
        {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let b = &nodes[rhs.id];
            let shape = broadcast_shapes(op_name, &a.shape, &b.shape)?;
            let a_exp = expand(&a.values, &a.shape, &shape);
            let b_exp = expand(&b.values, &b.shape, &shape);
            values = a_exp.iter().zip(&b_exp).map(|(x, y)| f(*x, *y)).collect();
            rg = a.requires_grad || b.requires_grad;
            out_shape = shape;
        }
        Ok(self.tape.push(out_shape, values, rg, make(self.id, rhs.id)))
    }

    pub fn try_add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary_broadcast(rhs, "add", |a, b| a + b, Op::Add)
    }
    pub fn try_sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary_broadcast(rhs, "sub", |a, b| a - b, Op::Sub)
    }
    pub fn try_mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary_broadcast(rhs, "mul", |a, b| a * b, Op::Mul)
    }
    pub fn try_div(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary_broadcast(rhs, "div", |a, b| a / b, Op::Div)
    }

    panicking!(add(rhs: Var<'t>) via try_add);
    panicking!(sub(rhs: Var<'t>) via try_sub);
    panicking!(mul(rhs: Var<'t>) via try_mul);
    panicking!(div(rhs: Var<'t>) via try_div);

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        let (shape, values, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            (a.shape.clone(), a.values.iter().map(|v| v + s).collect(), a.requires_grad)
        };
        self.tape.push(shape, values, rg, Op::AddScalar(self.id))
    }

    pub fn mul_scalar(self, s: f64) -> Var<'t> {
        let (shape, values, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            (a.shape.clone(), a.values.iter().map(|v| v * s).collect(), a.requires_grad)
        };
        self.tape.push(shape, values, rg, Op::MulScalar(self.id, s))
    }

    pub fn neg(self) -> Var<'t> {
        self.mul_scalar(-1.0)
    }

    /// 2-D matrix product `[m,p] . [p,n] -> [m,n]`.
    pub fn try_matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (m, p, n, values, rg);
        {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let b = &nodes[rhs.id];
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            m = a.shape[0];
            p = a.shape[1];
            n = b.shape[1];
            let mut out = vec![0.0; m * n];
            matmul_acc(&a.values, &b.values, m, p, n, &mut out);
            values = out;
            rg = a.requires_grad || b.requires_grad;
        }
        Ok(self
            .tape
            .push(vec![m, n], values, rg, Op::MatMul { a: self.id, b: rhs.id, m, p, n }))
    }
    panicking!(matmul(rhs: Var<'t>) via try_matmul);

    /// Batched matrix product `[B,m,p] . [B,p,n] -> [B,m,n]`.
    pub fn try_bmm(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (batch, m, p, n, values, rg);
        {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let b = &nodes[rhs.id];
            if a.shape.len() != 3 || b.shape.len() != 3 || a.shape[0] != b.shape[0] || a.shape[2] != b.shape[1] {
                return Err(TensorError::ShapeMismatch {
                    op: "bmm",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            batch = a.shape[0];
            m = a.shape[1];
            p = a.shape[2];
            n = b.shape[2];
            let mut out = vec![0.0; batch * m * n];
            for t in 0..batch {
                matmul_acc(
                    &a.values[t * m * p..(t + 1) * m * p],
                    &b.values[t * p * n..(t + 1) * p * n],
                    m,
                    p,
                    n,
                    &mut out[t * m * n..(t + 1) * m * n],
                );
            }
            values = out;
            rg = a.requires_grad || b.requires_grad;
        }
        Ok(self.tape.push(
            vec![batch, m, n],
            values,
            rg,
            Op::Bmm { a: self.id, b: rhs.id, batch, m, p, n },
        ))
    }
    panicking!(bmm(rhs: Var<'t>) via try_bmm);

    /// Swap the last two axes.
    pub fn try_transpose(self) -> Result<Var<'t>> {
        let (shape, values, rg);
        {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            if a.shape.len() < 2 {
                return Err(TensorError::InvalidShape {
                    op: "transpose",
                    shape: a.shape.clone(),
                    reason: "needs rank >= 2".into(),
                });
            }
            let nd = a.shape.len();
            let (rows, cols) = (a.shape[nd - 2], a.shape[nd - 1]);
            let leading: usize = a.shape[..nd - 2].iter().product();
            let mut out = Vec::with_capacity(a.values.len());
            for t in 0..leading {
                out.extend(transpose_2d(&a.values[t * rows * cols..(t + 1) * rows * cols], rows, cols));
            }
            let mut s = a.shape.clone();
            s.swap(nd - 2, nd - 1);
            shape = s;
            values = out;
            rg = a.requires_grad;
        }
        Ok(self.tape.push(shape, values, rg, Op::Transpose(self.id)))
    }
    panicking!(transpose() via try_transpose);

    pub fn try_reshape(self, new_shape: Vec<usize>) -> Result<Var<'t>> {
        let (values, rg);
        {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            if numel(&new_shape) != a.values.len() || new_shape.iter().any(|&d| d == 0) {
                return Err(TensorError::InvalidShape {
                    op: "reshape",
                    shape: new_shape.clone(),
                    reason: format!("incompatible with {} values", a.values.len()),
                });
            }
            values = a.values.clone();
            rg = a.requires_grad;
        }
        Ok(self.tape.push(new_shape, values, rg, Op::Reshape(self.id)))
    }
    pub fn reshape(self, new_shape: Vec<usize>) -> Var<'t> {
        self.try_reshape(new_shape).unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn sum(self) -> Var<'t> {
        let (v, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            (a.values.iter().sum::<f64>(), a.requires_grad)
        };
        self.tape.push(vec![1], vec![v], rg, Op::SumAll(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let (v, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            (a.values.iter().sum::<f64>() / a.values.len() as f64, a.requires_grad)
        };
        self.tape.push(vec![1], vec![v], rg, Op::MeanAll(self.id))
    }

    fn reduced_shape(shape: &[usize], keepdim: bool) -> Vec<usize> {
        let mut s = shape.to_vec();
        if keepdim {
            *s.last_mut().unwrap() = 1;
        } else {
            s.pop();
            if s.is_empty() {
                s.push(1);
            }
        }
        s
    }

    /// Sum over the last axis.
    pub fn sum_last(self, keepdim: bool) -> Var<'t> {
        let (shape, values, rg);
        {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let last = *a.shape.last().unwrap();
            values = a
                .values
                .chunks_exact(last)
                .map(|c| c.iter().sum::<f64>())
                .collect::<Vec<f64>>();
            shape = Self::reduced_shape(&a.shape, keepdim);
            rg = a.requires_grad;
        }
        self.tape.push(shape, values, rg, Op::SumLast(self.id))
    }

    pub fn square(self) -> Var<'t> {
        let (shape, values, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            (a.shape.clone(), a.values.iter().map(|v| v * v).collect(), a.requires_grad)
        };
        self.tape.push(shape, values, rg, Op::Square(self.id))
    }

    pub fn try_sqrt(self) -> Result<Var<'t>> {
        let (shape, values, rg);
        {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            if a.values.iter().any(|&v| v < 0.0) {
                return Err(TensorError::Domain { op: "sqrt", reason: "negative input".into() });
            }
            shape = a.shape.clone();
            values = a.values.iter().map(|v| v.sqrt()).collect();
            rg = a.requires_grad;
        }
        Ok(self.tape.push(shape, values, rg, Op::Sqrt(self.id)))
    }
    panicking!(sqrt() via try_sqrt);

    pub fn exp(self) -> Var<'t> {
        let (shape, values, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            (a.shape.clone(), a.values.iter().map(|v| v.exp()).collect(), a.requires_grad)
        };
        self.tape.push(shape, values, rg, Op::Exp(self.id))
    }

    pub fn try_log(self) -> Result<Var<'t>> {
        let (shape, values, rg);
        {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            if a.values.iter().any(|&v| v < 0.0) {
                return Err(TensorError::Domain { op: "log", reason: "negative input".into() });
            }
            shape = a.shape.clone();
            values = a.values.iter().map(|v| v.ln()).collect();
            rg = a.requires_grad;
        }
        Ok(self.tape.push(shape, values, rg, Op::Log(self.id)))
    }
    panicking!(log() via try_log);

    /// Concatenate along the last axis. All leading dimensions must agree.
    pub fn try_concat_last(self, others: &[Var<'t>]) -> Result<Var<'t>> {
        let mut ids = vec![self.id];
        ids.extend(others.iter().map(|v| v.id));
        let (shape, values, rg);
        {
            let nodes = self.tape.nodes.borrow();
            let lead = &nodes[self.id].shape[..nodes[self.id].shape.len() - 1];
            let mut last_total = 0usize;
            for &i in &ids {
                let s = &nodes[i].shape;
                if &s[..s.len() - 1] != lead {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat_last",
                        lhs: nodes[self.id].shape.clone(),
                        rhs: s.clone(),
                    });
                }
                last_total += *s.last().unwrap();
            }
            let rows: usize = lead.iter().product();
            let mut out = Vec::with_capacity(rows * last_total);
            for r in 0..rows {
                for &i in &ids {
                    let l = *nodes[i].shape.last().unwrap();
                    out.extend_from_slice(&nodes[i].values[r * l..(r + 1) * l]);
                }
            }
            let mut s = lead.to_vec();
            s.push(last_total);
            shape = s;
            values = out;
            rg = ids.iter().any(|&i| nodes[i].requires_grad);
        }
        Ok(self.tape.push(shape, values, rg, Op::ConcatLast(ids)))
    }
    pub fn concat_last(self, others: &[Var<'t>]) -> Var<'t> {
        self.try_concat_last(others).unwrap_or_else(|e| panic!("{e}"))
    }

    /// Euclidean norm over the last axis (subgradient 0 at the origin).
    pub fn row_l2_norm(self) -> Var<'t> {
        let (shape, values, rg);
        {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let last = *a.shape.last().unwrap();
            values = a
                .values
                .chunks_exact(last)
                .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect::<Vec<f64>>();
            shape = Self::reduced_shape(&a.shape, false);
            rg = a.requires_grad;
        }
        self.tape.push(shape, values, rg, Op::RowL2Norm(self.id))
    }

    /// Numerically stable `log(sum(exp(x)))` over the last axis.
    pub fn logsumexp_last(self) -> Var<'t> {
        let (shape, values, rg);
        {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let last = *a.shape.last().unwrap();
            values = a
                .values
                .chunks_exact(last)
                .map(|c| {
                    let m = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    m + c.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
                })
                .collect::<Vec<f64>>();
            shape = Self::reduced_shape(&a.shape, false);
            rg = a.requires_grad;
        }
        self.tape.push(shape, values, rg, Op::LogSumExpLast(self.id))
    }

    /// Softmax over the last axis of `self + mask`.
    ///
    /// Mask entries must be finite or `-inf`; a `-inf` position gets weight
    /// exactly 0. A slice whose entries are all masked is an error: callers
    /// are responsible for never producing one.
    pub fn try_masked_softmax(self, mask: Var<'t>) -> Result<Var<'t>> {
        let (shape, values, rg);
        {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let m = &nodes[mask.id];
            if m.values.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
                return Err(TensorError::Domain {
                    op: "masked_softmax",
                    reason: "mask entries must be finite or -inf".into(),
                });
            }
            let out_shape = broadcast_shapes("masked_softmax", &a.shape, &m.shape)?;
            if out_shape != a.shape {
                return Err(TensorError::ShapeMismatch {
                    op: "masked_softmax",
                    lhs: a.shape.clone(),
                    rhs: m.shape.clone(),
                });
            }
            let mask_exp = expand(&m.values, &m.shape, &out_shape);
            let last = *out_shape.last().unwrap();
            let slices = a.values.len() / last;
            let mut out = vec![0.0; a.values.len()];
            for s in 0..slices {
                let logits = &a.values[s * last..(s + 1) * last];
                let mk = &mask_exp[s * last..(s + 1) * last];
                let mut max = f64::NEG_INFINITY;
                for (l, mv) in logits.iter().zip(mk) {
                    let v = l + mv;
                    if v > max {
                        max = v;
                    }
                }
                if max == f64::NEG_INFINITY {
                    return Err(TensorError::FullyMaskedRow { slice: s });
                }
                let o = &mut out[s * last..(s + 1) * last];
                let mut denom = 0.0;
                for ((ov, l), mv) in o.iter_mut().zip(logits).zip(mk) {
                    let e = if *mv == f64::NEG_INFINITY { 0.0 } else { (l + mv - max).exp() };
                    *ov = e;
                    denom += e;
                }
                for ov in o.iter_mut() {
                    *ov /= denom;
                }
            }
            shape = out_shape;
            values = out;
            rg = a.requires_grad || m.requires_grad;
        }
        Ok(self.tape.push(shape, values, rg, Op::MaskedSoftmax { logits: self.id, mask: mask.id }))
    }
    panicking!(masked_softmax(mask: Var<'t>) via try_masked_softmax);

    /// PReLU with a learnable slope: scalar `[1]` or per-channel `[last_dim]`.
    pub fn try_prelu(self, slope: Var<'t>) -> Result<Var<'t>> {
        let (shape, values, rg);
        {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let s = &nodes[slope.id];
            let last = *a.shape.last().unwrap();
            if s.values.len() != 1 && s.values.len() != last {
                return Err(TensorError::ShapeMismatch {
                    op: "prelu",
                    lhs: a.shape.clone(),
                    rhs: s.shape.clone(),
                });
            }
            let sl = s.values.len();
            values = a
                .values
                .iter()
                .enumerate()
                .map(|(idx, &x)| {
                    if x > 0.0 {
                        x
                    } else {
                        let sv = if sl == 1 { s.values[0] } else { s.values[idx % last] };
                        sv * x
                    }
                })
                .collect::<Vec<f64>>();
            shape = a.shape.clone();
            rg = a.requires_grad || s.requires_grad;
        }
        Ok(self.tape.push(shape, values, rg, Op::Prelu { input: self.id, slope: slope.id }))
    }
    panicking!(prelu(slope: Var<'t>) via try_prelu);

    /// Layer normalization over the last axis with learnable scale and shift.
    pub fn try_layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (shape, values, rg);
        {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let g = &nodes[gamma.id];
            let b = &nodes[beta.id];
            let d = *a.shape.last().unwrap();
            if g.values.len() != d || b.values.len() != d {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: a.shape.clone(),
                    rhs: g.shape.clone(),
                });
            }
            let rows = a.values.len() / d;
            let mut out = vec![0.0; a.values.len()];
            for r in 0..rows {
                let xs = &a.values[r * d..(r + 1) * d];
                let mean = xs.iter().sum::<f64>() / d as f64;
                let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv_std = 1.0 / (var + eps).sqrt();
                for j in 0..d {
                    out[r * d + j] = (xs[j] - mean) * inv_std * g.values[j] + b.values[j];
                }
            }
            shape = a.shape.clone();
            values = out;
            rg = a.requires_grad || g.requires_grad || b.requires_grad;
        }
        Ok(self.tape.push(
            shape,
            values,
            rg,
            Op::LayerNorm { input: self.id, gamma: gamma.id, beta: beta.id, eps },
        ))
    }
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Var<'t> {
        self.try_layer_norm(gamma, beta, eps).unwrap_or_else(|e| panic!("{e}"))
    }
}

impl<'t> std::ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        Var::add(self, rhs)
    }
}
impl<'t> std::ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        Var::sub(self, rhs)
    }
}
impl<'t> std::ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        Var::mul(self, rhs)
    }
}

// ---------------------------------------------------------------------------
// Gradient checking.
// ---------------------------------------------------------------------------

/// A named parameter block fed to [`grad_check`].
#[derive(Debug, Clone)]
pub struct CheckParam {
    pub name: String,
    pub values: Vec<f64>,
    pub shape: Vec<usize>,
}

impl CheckParam {
    pub fn new(name: &str, values: Vec<f64>, shape: Vec<usize>) -> Self {
        CheckParam { name: name.into(), values, shape }
    }
}

/// Compare analytic gradients of `f` against central finite differences.
///
/// `f` receives a fresh tape and one `Var` per parameter (in order) and must
/// return a scalar loss; it must be deterministic, which is verified by
/// evaluating twice and comparing bitwise. Returns the maximum over all
/// parameter coordinates of `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, params: &[CheckParam], step: f64) -> Result<f64>
where
    F: for<'a> Fn(&'a Tape, &[Var<'a>]) -> Var<'a>,
{
    let eval = |values: &[Vec<f64>]| -> (f64, Vec<Vec<f64>>) {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = params
            .iter()
            .zip(values)
            .map(|(p, v)| tape.param(v.clone(), p.shape.clone()))
            .collect();
        let loss = f(&tape, &vars);
        tape.backward(loss).unwrap_or_else(|e| panic!("{e}"));
        let grads = vars.iter().map(|v| v.grad().unwrap_or_default()).collect();
        (loss.value_scalar(), grads)
    };

    let base: Vec<Vec<f64>> = params.iter().map(|p| p.values.clone()).collect();
    let (loss_a, analytic) = eval(&base);
    let (loss_b, _) = eval(&base);
    if loss_a.to_bits() != loss_b.to_bits() {
        return Err(TensorError::NonDeterministic { a: loss_a, b: loss_b });
    }

    let mut max_rel = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        for ci in 0..p.values.len() {
            let mut plus = base.clone();
            plus[pi][ci] += step;
            let mut minus = base.clone();
            minus[pi][ci] -= step;
            let tape_val = |vals: &[Vec<f64>]| -> f64 {
                let tape = Tape::new();
                let vars: Vec<Var<'_>> = params
                    .iter()
                    .zip(vals)
                    .map(|(p, v)| tape.param(v.clone(), p.shape.clone()))
                    .collect();
                f(&tape, &vars).value_scalar()
            };
            let numeric = (tape_val(&plus) - tape_val(&minus)) / (2.0 * step);
            let a = analytic[pi][ci];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < tol, "{x} vs {y}");
        }
    }

    #[test]
    fn matmul_identity() {
        let t = Tape::new();
        let eye = t.constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]);
        let a = t.constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]);
        let c = eye.matmul(a);
        assert_eq!(c.values(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_oracle() {
        let t = Tape::new();
        let a = t.constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]);
        let b = t.constant(vec![5.0, 6.0], vec![2, 1]);
        let c = a.matmul(b);
        assert_eq!(c.values(), vec![17.0, 39.0]);
    }

    #[test]
    fn matmul_grad_linearity() {
        let t = Tape::new();
        let a = t.param(vec![0.3, -0.7, 1.2, 0.4, 2.0, -1.0], vec![3, 2]);
        let b = t.constant(vec![1.0, 1.0], vec![2, 1]);
        let loss = a.matmul(b).sum();
        t.backward(loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let t = Tape::new();
        let a = t.constant(vec![0.0; 6], vec![2, 3]);
        let b = t.constant(vec![0.0; 4], vec![2, 2]);
        let err = a.try_matmul(b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn masked_softmax_single_survivor() {
        let t = Tape::new();
        let logits = t.constant(vec![0.0, 0.0], vec![2]);
        let mask = t.constant(vec![0.0, f64::NEG_INFINITY], vec![2]);
        let s = logits.masked_softmax(mask);
        assert_eq!(s.values(), vec![1.0, 0.0]);
    }

    #[test]
    fn masked_softmax_symmetry() {
        let t = Tape::new();
        let logits = t.constant(vec![0.0; 3], vec![3]);
        let mask = t.constant(vec![0.0; 3], vec![3]);
        let s = logits.masked_softmax(mask);
        assert_close(&s.values(), &[1.0 / 3.0; 3], 1e-15);
    }

    #[test]
    fn masked_softmax_direct_eval() {
        let t = Tape::new();
        let logits = t.constant(vec![1.0, 0.0], vec![2]);
        let mask = t.constant(vec![0.0, 0.0], vec![2]);
        let s = logits.masked_softmax(mask);
        let e = std::f64::consts::E;
        assert_close(&s.values(), &[e / (e + 1.0), 1.0 / (e + 1.0)], 1e-12);
    }

    #[test]
    fn masked_softmax_fully_masked_row_errors() {
        let t = Tape::new();
        let logits = t.constant(vec![0.0, 0.0], vec![1, 2]);
        let mask = t.constant(vec![f64::NEG_INFINITY; 2], vec![1, 2]);
        let err = logits.try_masked_softmax(mask).unwrap_err();
        assert!(matches!(err, TensorError::FullyMaskedRow { .. }));
    }

    #[test]
    fn prelu_examples() {
        let t = Tape::new();
        let x = t.constant(vec![2.0, -4.0, 0.0], vec![3]);
        let slope = t.param(vec![0.25], vec![1]);
        let y = x.prelu(slope);
        assert_eq!(y.values(), vec![2.0, -1.0, 0.0]);
    }

    #[test]
    fn prelu_routes_gradient_to_slope() {
        let t = Tape::new();
        let x = t.constant(vec![2.0, -4.0], vec![2]);
        let slope = t.param(vec![0.25], vec![1]);
        let loss = x.prelu(slope).sum();
        t.backward(loss).unwrap();
        // Only the negative entry contributes: d/ds (s * -4) = -4.
        assert_eq!(slope.grad().unwrap(), vec![-4.0]);
    }

    #[test]
    fn elementwise_examples() {
        let t = Tape::new();
        assert_eq!(t.constant(vec![1.0], vec![1]).log().values(), vec![0.0]);
        assert_eq!(t.constant(vec![3.0, 4.0], vec![2]).row_l2_norm().values(), vec![5.0]);
        let a = t.constant(vec![1.0, 2.0], vec![2]);
        let b = t.constant(vec![3.0], vec![1]);
        assert_eq!(a.concat_last(&[b]).values(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn log_domain_error() {
        let t = Tape::new();
        let x = t.constant(vec![-1.0], vec![1]);
        assert!(matches!(x.try_log().unwrap_err(), TensorError::Domain { .. }));
        assert!(matches!(x.try_sqrt().unwrap_err(), TensorError::Domain { .. }));
    }

    #[test]
    fn backward_sum_gives_ones() {
        let t = Tape::new();
        let x = t.param(vec![0.5, -1.0, 2.0, 7.0, 0.0, 3.0], vec![2, 3]);
        let loss = x.sum();
        t.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn backward_square_power_rule() {
        let t = Tape::new();
        let x = t.param(vec![3.0], vec![1]);
        let loss = x.square().sum();
        t.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn backward_non_scalar_loss_rejected() {
        let t = Tape::new();
        let x = t.param(vec![1.0, 2.0], vec![2]);
        assert!(matches!(t.backward(x).unwrap_err(), TensorError::NonScalarLoss { .. }));
    }

    #[test]
    fn unreachable_param_gets_zero_grad() {
        let t = Tape::new();
        let x = t.param(vec![1.0], vec![1]);
        let y = t.param(vec![5.0], vec![1]);
        let loss = x.square().sum();
        t.backward(loss).unwrap();
        assert_eq!(y.grad().unwrap(), vec![0.0]);
    }

    #[test]
    fn composite_matches_finite_differences() {
        // exp(x) * y summed, then log of (sum + 1): a three-op composite.
        let max = grad_check(
            |t, vars| {
                let prod = vars[0].exp().mul(vars[1]);
                prod.sum().add_scalar(1.0).log().sum()
            },
            &[
                CheckParam::new("x", vec![0.3, -0.2, 0.7], vec![3]),
                CheckParam::new("y", vec![1.5, 0.4, -0.6], vec![3]),
            ],
            1e-5,
        )
        .unwrap();
        assert!(max < 1e-6, "max rel err {max}");
    }

    #[test]
    fn grad_check_linear_layer() {
        let max = grad_check(
            |t, vars| {
                let x = t.constant(vec![0.2, -0.4, 0.9, 1.1, -0.3, 0.5], vec![2, 3]);
                x.matmul(vars[0]).add(vars[1]).square().mean()
            },
            &[
                CheckParam::new("w", vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6], vec![3, 2]),
                CheckParam::new("b", vec![0.05, -0.07], vec![2]),
            ],
            1e-5,
        )
        .unwrap();
        assert!(max < 1e-6, "max rel err {max}");
    }

    #[test]
    fn grad_check_covers_custom_ops() {
        let max = grad_check(
            |t, vars| {
                let mask = t.constant(vec![0.0, 0.0, f64::NEG_INFINITY, 0.0, 0.0, 0.0], vec![2, 3]);
                let sm = vars[0].masked_softmax(mask);
                let ln = sm.layer_norm(vars[1], vars[2], 1e-5);
                let pr = ln.prelu(vars[3]);
                pr.row_l2_norm().sum().add(vars[0].logsumexp_last().sum())
            },
            &[
                CheckParam::new("x", vec![0.3, -0.9, 0.4, 1.2, 0.1, -0.5], vec![2, 3]),
                CheckParam::new("gamma", vec![1.1, 0.9, 1.0], vec![3]),
                CheckParam::new("beta", vec![0.0, 0.1, -0.1], vec![3]),
                CheckParam::new("slope", vec![0.25], vec![1]),
            ],
            1e-5,
        )
        .unwrap();
        assert!(max < 1e-6, "max rel err {max}");
    }

    #[test]
    fn tape_replay_is_bitwise_deterministic() {
        let run = || {
            let t = Tape::new();
            let x = t.param(vec![0.37, -1.2, 0.001, 5.5], vec![2, 2]);
            let w = t.param(vec![0.9, -0.3, 0.2, 0.8], vec![2, 2]);
            let loss = x.matmul(w).exp().mean();
            t.backward(loss).unwrap();
            (loss.value_scalar(), x.grad().unwrap(), w.grad().unwrap())
        };
        let (l1, gx1, gw1) = run();
        let (l2, gx2, gw2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert!(gx1.iter().zip(&gx2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(gw1.iter().zip(&gw2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn bmm_matches_per_slice_matmul() {
        let t = Tape::new();
        let a = t.constant((0..12).map(|i| i as f64).collect(), vec![2, 2, 3]);
        let b = t.constant((0..12).map(|i| (i as f64) * 0.5).collect(), vec![2, 3, 2]);
        let c = a.bmm(b);
        let a0 = t.constant((0..6).map(|i| i as f64).collect(), vec![2, 3]);
        let b0 = t.constant((0..6).map(|i| (i as f64) * 0.5).collect(), vec![3, 2]);
        let c0 = a0.matmul(b0);
        assert_eq!(c.values()[..4], c0.values()[..]);
    }

    #[test]
    fn broadcast_pairwise_difference() {
        // [2,1,2] - [1,2,2] -> [2,2,2], the pairwise pattern used by the
        // robustness loss.
        let t = Tape::new();
        let a = t.constant(vec![0.0, 0.0, 1.0, 1.0], vec![2, 1, 2]);
        let b = t.constant(vec![0.0, 0.0, 3.0, 4.0], vec![1, 2, 2]);
        let d = a.sub(b).row_l2_norm();
        assert_eq!(d.shape(), vec![2, 2]);
        assert_close(&d.values(), &[0.0, 5.0, 2.0f64.sqrt(), (4.0 + 9.0f64).sqrt()], 1e-12);
    }

    proptest! {
        #[test]
        fn masked_softmax_rows_normalized(
            logits in proptest::collection::vec(-20.0..20.0f64, 12),
            mask_bits in proptest::collection::vec(prop::bool::ANY, 12),
        ) {
            // Keep at least one unmasked entry per row of 4.
            let mut mask = vec![0.0f64; 12];
            for (i, &b) in mask_bits.iter().enumerate() {
                if b { mask[i] = f64::NEG_INFINITY; }
            }
            for row in 0..3 {
                if mask[row * 4..(row + 1) * 4].iter().all(|&v| v == f64::NEG_INFINITY) {
                    mask[row * 4] = 0.0;
                }
            }
            let t = Tape::new();
            let l = t.constant(logits, vec![3, 4]);
            let m = t.constant(mask.clone(), vec![3, 4]);
            let s = l.masked_softmax(m);
            let v = s.values();
            for row in 0..3 {
                let sum: f64 = v[row * 4..(row + 1) * 4].iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                for col in 0..4 {
                    prop_assert!(v[row * 4 + col] >= 0.0);
                    if mask[row * 4 + col] == f64::NEG_INFINITY {
                        prop_assert_eq!(v[row * 4 + col], 0.0);
                    }
                }
            }
        }

        #[test]
        fn broadcast_add_matches_manual(
            a in proptest::collection::vec(-5.0..5.0f64, 6),
            b in proptest::collection::vec(-5.0..5.0f64, 3),
        ) {
            let t = Tape::new();
            let av = t.constant(a.clone(), vec![2, 3]);
            let bv = t.constant(b.clone(), vec![3]);
            let c = av.add(bv);
            for i in 0..2 {
                for j in 0..3 {
                    prop_assert_eq!(c.values()[i * 3 + j], a[i * 3 + j] + b[j]);
                }
            }
        }
    }
}
