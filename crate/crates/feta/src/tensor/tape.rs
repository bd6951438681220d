//! Recording tape for reverse-mode differentiation.
//!
//! A [`Tape`] owns every intermediate tensor of one forward computation.
//! [`Var`] is a copyable handle (tape reference + node index); arithmetic on
//! vars appends nodes. [`Tape::backward`] seeds the scalar output with 1 and
//! sweeps the node list in reverse, accumulating adjoints with `+=` so a
//! tensor used twice receives both contributions. Drop or [`Tape::clear`] the
//! tape between optimizer steps.
//!
//! Primitive set: matmul, softmax_rows, elementwise add/sub/mul (mul also
//! accepts one scalar operand), ReLU, LeakyReLU(0.2), exp, log, transpose,
//! concat along the last axis, mean over an axis, layer-norm, Frobenius norm.
//! Everything else in the toolkit is composed from these.

use std::cell::{Ref, RefCell};

use crate::error::{FetaError, Result};
use crate::tensor::Tensor;

const LEAKY_SLOPE: f64 = 0.2;
const LAYER_NORM_EPS: f64 = 1e-5;
// Subgradient guard: ‖x‖_F has no gradient at 0; x/max(‖x‖, ε) picks 0 there.
const FROB_EPS: f64 = 1e-12;

enum Op {
    Leaf,
    Matmul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Relu(usize),
    LeakyRelu(usize),
    Exp(usize),
    Log(usize),
    Transpose(usize),
    ConcatCols(Vec<usize>),
    MeanAxis(usize, usize),
    SoftmaxRows(usize),
    LayerNorm { x: usize, gain: usize, bias: usize },
    FrobNorm(usize),
}

struct Node {
    value: Tensor,
    grad: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Forget all recorded nodes. Vars handed out earlier become invalid.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
    }

    /// Differentiable input; gradient is collected for it on backward.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input (graph structure, masks, fixed data).
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    // Non-finite values are allowed to flow through the tape; divergence is
    // detected at the loss by callers, not here.
    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let grad = vec![0.0; value.numel()];
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, grad, op, needs_grad });
        Var { tape: self, idx: nodes.len() - 1 }
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes.borrow()[idx].needs_grad
    }

    fn value_clone(&self, idx: usize) -> Tensor {
        self.nodes.borrow()[idx].value.clone()
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var<'_>) -> Result<()> {
        {
            let mut nodes = self.nodes.borrow_mut();
            let out = &mut nodes[output.idx];
            if !out.value.is_scalar() {
                return Err(FetaError::Contract(format!(
                    "backward requires a scalar output, got shape {:?}",
                    out.value.shape
                )));
            }
            out.grad[0] += 1.0;
        }
        let n = self.nodes.borrow().len();
        for i in (0..=output.idx.min(n - 1)).rev() {
            self.step_back(i);
        }
        Ok(())
    }

    /// Accumulated gradient of a leaf (or any node) after backward.
    pub fn grad_of(&self, v: Var<'_>) -> Tensor {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.idx];
        Tensor::new(node.value.shape.clone(), node.grad.clone())
    }

    #[allow(clippy::too_many_lines)]
    fn step_back(&self, i: usize) {
        let mut nodes = self.nodes.borrow_mut();
        if !nodes[i].needs_grad || nodes[i].grad.iter().all(|g| *g == 0.0) {
            return;
        }
        if matches!(nodes[i].op, Op::Leaf) {
            return;
        }
        // Take the node's grad out to satisfy the borrow checker; ops below
        // read parent values and write parent grads. Restored at the end so
        // gradients stay readable for every node.
        let grad = std::mem::take(&mut nodes[i].grad);
        macro_rules! value {
            ($j:expr) => {
                &nodes[$j].value
            };
        }
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::Matmul(a, b) => {
                let (m, k) = (value!(a).rows(), value!(a).cols());
                let n = value!(b).cols();
                // dA += G · Bᵀ
                let mut da = vec![0.0; m * k];
                {
                    let bv = &value!(b).data;
                    for i0 in 0..m {
                        for j in 0..n {
                            let g = grad[i0 * n + j];
                            if g == 0.0 {
                                continue;
                            }
                            for kk in 0..k {
                                da[i0 * k + kk] += g * bv[kk * n + j];
                            }
                        }
                    }
                }
                // dB += Aᵀ · G
                let mut db = vec![0.0; k * n];
                {
                    let av = &value!(a).data;
                    for i0 in 0..m {
                        for kk in 0..k {
                            let x = av[i0 * k + kk];
                            if x == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[kk * n + j] += x * grad[i0 * n + j];
                            }
                        }
                    }
                }
                accumulate(&mut nodes[a].grad, &da);
                accumulate(&mut nodes[b].grad, &db);
            }
            &Op::Add(a, b) => {
                accumulate(&mut nodes[a].grad, &grad);
                accumulate(&mut nodes[b].grad, &grad);
            }
            &Op::Sub(a, b) => {
                accumulate(&mut nodes[a].grad, &grad);
                for (g, d) in nodes[b].grad.iter_mut().zip(&grad) {
                    *g -= d;
                }
            }
            &Op::Mul(a, b) => {
                let (na, nb) = (value!(a).numel(), value!(b).numel());
                if na == nb {
                    let da: Vec<f64> =
                        grad.iter().zip(&value!(b).data).map(|(g, v)| g * v).collect();
                    let db: Vec<f64> =
                        grad.iter().zip(&value!(a).data).map(|(g, v)| g * v).collect();
                    accumulate(&mut nodes[a].grad, &da);
                    accumulate(&mut nodes[b].grad, &db);
                } else if na == 1 {
                    let s = value!(a).data[0];
                    let da: f64 = grad.iter().zip(&value!(b).data).map(|(g, v)| g * v).sum();
                    let db: Vec<f64> = grad.iter().map(|g| g * s).collect();
                    nodes[a].grad[0] += da;
                    accumulate(&mut nodes[b].grad, &db);
                } else {
                    let s = value!(b).data[0];
                    let db: f64 = grad.iter().zip(&value!(a).data).map(|(g, v)| g * v).sum();
                    let da: Vec<f64> = grad.iter().map(|g| g * s).collect();
                    nodes[b].grad[0] += db;
                    accumulate(&mut nodes[a].grad, &da);
                }
            }
            &Op::Relu(a) => {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(&value!(a).data)
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(&mut nodes[a].grad, &da);
            }
            &Op::LeakyRelu(a) => {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(&value!(a).data)
                    .map(|(g, x)| if *x > 0.0 { *g } else { g * LEAKY_SLOPE })
                    .collect();
                accumulate(&mut nodes[a].grad, &da);
            }
            &Op::Exp(a) => {
                let da: Vec<f64> = grad.iter().zip(&nodes[i].value.data).map(|(g, y)| g * y).collect();
                accumulate(&mut nodes[a].grad, &da);
            }
            &Op::Log(a) => {
                let da: Vec<f64> = grad.iter().zip(&value!(a).data).map(|(g, x)| g / x).collect();
                accumulate(&mut nodes[a].grad, &da);
            }
            &Op::Transpose(a) => {
                let (r, c) = (value!(a).rows(), value!(a).cols());
                let mut da = vec![0.0; r * c];
                for i0 in 0..c {
                    for j in 0..r {
                        da[j * c + i0] = grad[i0 * r + j];
                    }
                }
                accumulate(&mut nodes[a].grad, &da);
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let r = nodes[i].value.rows();
                let total = nodes[i].value.cols();
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p].value.cols();
                    let mut dp = vec![0.0; r * w];
                    for i0 in 0..r {
                        dp[i0 * w..(i0 + 1) * w]
                            .copy_from_slice(&grad[i0 * total + offset..i0 * total + offset + w]);
                    }
                    accumulate(&mut nodes[p].grad, &dp);
                    offset += w;
                }
            }
            &Op::MeanAxis(a, axis) => {
                let (r, c) = (value!(a).rows(), value!(a).cols());
                let mut da = vec![0.0; r * c];
                if axis == 0 {
                    for i0 in 0..r {
                        for j in 0..c {
                            da[i0 * c + j] = grad[j] / r as f64;
                        }
                    }
                } else {
                    for i0 in 0..r {
                        for j in 0..c {
                            da[i0 * c + j] = grad[i0] / c as f64;
                        }
                    }
                }
                accumulate(&mut nodes[a].grad, &da);
            }
            &Op::SoftmaxRows(a) => {
                let y = &nodes[i].value;
                let (r, c) = (y.rows(), y.cols());
                let mut da = vec![0.0; r * c];
                for i0 in 0..r {
                    let yr = &y.data[i0 * c..(i0 + 1) * c];
                    let gr = &grad[i0 * c..(i0 + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                    for j in 0..c {
                        da[i0 * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(&mut nodes[a].grad, &da);
            }
            &Op::LayerNorm { x, gain, bias } => {
                let xv = value!(x);
                let (r, c) = (xv.rows(), xv.cols());
                let gv = &value!(gain).data;
                let mut dx = vec![0.0; r * c];
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                for i0 in 0..r {
                    let row = &xv.data[i0 * c..(i0 + 1) * c];
                    let gr = &grad[i0 * c..(i0 + 1) * c];
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> = gr.iter().zip(gv).map(|(g, gn)| g * gn).collect();
                    let m1 = dxhat.iter().sum::<f64>() / c as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(d, h)| d * h).sum::<f64>() / c as f64;
                    for j in 0..c {
                        dx[i0 * c + j] = inv * (dxhat[j] - m1 - xhat[j] * m2);
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                    }
                }
                accumulate(&mut nodes[x].grad, &dx);
                accumulate(&mut nodes[gain].grad, &dgain);
                accumulate(&mut nodes[bias].grad, &dbias);
            }
            &Op::FrobNorm(a) => {
                let norm = nodes[i].value.data[0].max(FROB_EPS);
                let g = grad[0];
                let da: Vec<f64> = value!(a).data.iter().map(|x| g * x / norm).collect();
                accumulate(&mut nodes[a].grad, &da);
            }
        }
        nodes[i].grad = grad;
    }
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |nodes| &nodes[self.idx].value)
    }

    pub fn value_clone(&self) -> Tensor {
        self.tape.value_clone(self.idx)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape.clone()
    }

    /// Scalar payload of a 1-element var.
    pub fn scalar_value(&self) -> f64 {
        let v = self.value();
        assert!(v.is_scalar(), "scalar_value on shape {:?}", v.shape);
        v.data[0]
    }

    pub fn grad(&self) -> Tensor {
        self.tape.grad_of(*self)
    }

    fn unary(self, op: fn(usize) -> Op, value: Tensor) -> Var<'t> {
        let needs = self.tape.needs(self.idx);
        self.tape.push(value, op(self.idx), needs)
    }

    fn same_tape(self, other: Var<'t>) {
        debug_assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes combined"
        );
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(other);
        let value = self.value().matmul(&other.value());
        let needs = self.tape.needs(self.idx) || self.tape.needs(other.idx);
        self.tape.push(value, Op::Matmul(self.idx, other.idx), needs)
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(other);
        let value = self.value().add(&other.value());
        let needs = self.tape.needs(self.idx) || self.tape.needs(other.idx);
        self.tape.push(value, Op::Add(self.idx, other.idx), needs)
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(other);
        let value = self.value().sub(&other.value());
        let needs = self.tape.needs(self.idx) || self.tape.needs(other.idx);
        self.tape.push(value, Op::Sub(self.idx, other.idx), needs)
    }

    /// Elementwise product; one operand may be a 1-element scalar.
    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(other);
        let value = {
            let a = self.value();
            let b = other.value();
            if a.is_scalar() && !b.is_scalar() {
                b.scale(a.data[0])
            } else if b.is_scalar() && !a.is_scalar() {
                a.scale(b.data[0])
            } else {
                a.hadamard(&b)
            }
        };
        let needs = self.tape.needs(self.idx) || self.tape.needs(other.idx);
        self.tape.push(value, Op::Mul(self.idx, other.idx), needs)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let s = self.tape.constant_scalar(c);
        self.mul(s)
    }

    pub fn relu(self) -> Var<'t> {
        let value = {
            let v = self.value();
            Tensor::new(v.shape.clone(), v.data.iter().map(|x| x.max(0.0)).collect())
        };
        self.unary(Op::Relu, value)
    }

    pub fn leaky_relu(self) -> Var<'t> {
        let value = {
            let v = self.value();
            Tensor::new(
                v.shape.clone(),
                v.data.iter().map(|x| if *x > 0.0 { *x } else { LEAKY_SLOPE * x }).collect(),
            )
        };
        self.unary(Op::LeakyRelu, value)
    }

    pub fn exp(self) -> Var<'t> {
        let value = {
            let v = self.value();
            Tensor::new(v.shape.clone(), v.data.iter().map(|x| x.exp()).collect())
        };
        self.unary(Op::Exp, value)
    }

    /// Natural log; caller guarantees strictly positive input.
    pub fn log(self) -> Var<'t> {
        let value = {
            let v = self.value();
            Tensor::new(v.shape.clone(), v.data.iter().map(|x| x.ln()).collect())
        };
        self.unary(Op::Log, value)
    }

    pub fn transpose(self) -> Var<'t> {
        let value = self.value().transpose();
        self.unary(Op::Transpose, value)
    }

    pub fn softmax_rows(self) -> Var<'t> {
        let value = self.value().softmax_rows();
        self.unary(Op::SoftmaxRows, value)
    }

    pub fn mean_axis(self, axis: usize) -> Var<'t> {
        assert!(axis < 2, "mean_axis over 2-D tensors only");
        let value = {
            let v = self.value();
            let (r, c) = (v.rows(), v.cols());
            if axis == 0 {
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        out[j] += v.data[i * c + j];
                    }
                }
                for o in &mut out {
                    *o /= r as f64;
                }
                Tensor::new(vec![1, c], out)
            } else {
                let mut out = vec![0.0; r];
                for i in 0..r {
                    out[i] = v.data[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64;
                }
                Tensor::new(vec![r, 1], out)
            }
        };
        let needs = self.tape.needs(self.idx);
        self.tape.push(value, Op::MeanAxis(self.idx, axis), needs)
    }

    pub fn frob_norm(self) -> Var<'t> {
        let value = Tensor::scalar(self.value().frob_norm());
        self.unary(Op::FrobNorm, value)
    }

    /// `gain ⊙ (x − μ)/√(σ² + ε) + bias`, row-wise; gain/bias are `[1×d]`.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>) -> Var<'t> {
        self.same_tape(gain);
        self.same_tape(bias);
        let value = {
            let x = self.value();
            let g = gain.value();
            let b = bias.value();
            let (r, c) = (x.rows(), x.cols());
            assert_eq!(g.numel(), c, "layer-norm gain width");
            assert_eq!(b.numel(), c, "layer-norm bias width");
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let row = &x.data[i * c..(i + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                for j in 0..c {
                    out[i * c + j] = g.data[j] * (row[j] - mean) * inv + b.data[j];
                }
            }
            Tensor::new(vec![r, c], out)
        };
        let needs = self.tape.needs(self.idx)
            || self.tape.needs(gain.idx)
            || self.tape.needs(bias.idx);
        self.tape.push(
            value,
            Op::LayerNorm { x: self.idx, gain: gain.idx, bias: bias.idx },
            needs,
        )
    }
}

/// Concatenate along the last axis (columns).
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty(), "concat of zero parts");
    let tape = parts[0].tape;
    let r = parts[0].value().rows();
    let total: usize = parts.iter().map(|p| p.value().cols()).sum();
    let mut data = Vec::with_capacity(r * total);
    for i in 0..r {
        for p in parts {
            let v = p.value();
            assert_eq!(v.rows(), r, "concat row counts differ");
            let c = v.cols();
            data.extend_from_slice(&v.data[i * c..(i + 1) * c]);
        }
    }
    let needs = parts.iter().any(|p| tape.needs(p.idx));
    tape.push(
        Tensor::new(vec![r, total], data),
        Op::ConcatCols(parts.iter().map(|p| p.idx).collect()),
        needs,
    )
}

// ── Composite helpers (no tape rules of their own) ──────────────────────────

/// Sum of all entries: chained means scaled back by the element count.
pub fn sum_all(v: Var<'_>) -> Var<'_> {
    let n = v.value().numel() as f64;
    v.mean_axis(0).mean_axis(1).scale(n)
}

/// Elementwise absolute value as relu(x) + relu(−x).
pub fn abs(v: Var<'_>) -> Var<'_> {
    let zero = v.tape().constant(Tensor::zeros(&v.shape()));
    v.relu().add(zero.sub(v).relu())
}

/// Bias row broadcast over `n` rows via 1ₙ·b.
pub fn broadcast_rows<'t>(bias: Var<'t>, n: usize) -> Var<'t> {
    let ones = bias.tape().constant(Tensor::ones(&[n, 1]));
    ones.matmul(bias)
}
