//! Dense float64 tensors with reverse-mode automatic differentiation.
//!
//! Everything in this toolkit runs at desk scale (graphs of a few dozen to a
//! few hundred nodes), so tensors are plain row-major `Vec<f64>` buffers and
//! every operation is an honest loop. `Tensor` is the inert value type;
//! differentiable computation goes through [`tape::Tape`], which records ops
//! and replays them backwards. [`gradcheck::finite_diff_check`] closes the
//! loop by comparing tape gradients against central differences.

mod gradcheck;
mod tape;

pub use gradcheck::finite_diff_check;
pub use tape::{abs, broadcast_rows, concat_cols, sum_all, Tape, Var};

use crate::error::{FetaError, Result};

/// Dense row-major float64 array.
///
/// `grad` is populated by [`Tape::backward`] export for parameter tensors;
/// it is `None` until a backward pass has run.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match buffer length {}",
            shape,
            data.len()
        );
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::new(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::new(shape.to_vec(), vec![1.0; shape.iter().product()])
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Tensor::new(shape.to_vec(), vec![v; shape.iter().product()])
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1, 1], vec![v])
    }

    /// Column vector from a slice.
    pub fn col(v: &[f64]) -> Self {
        Tensor::new(vec![v.len(), 1], v.to_vec())
    }

    /// Row vector from a slice.
    pub fn row(v: &[f64]) -> Self {
        Tensor::new(vec![1, v.len()], v.to_vec())
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Row count, treating rank-1 tensors as single rows.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => panic!("cols() on rank-{} tensor", self.shape.len()),
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    // ── Plain (non-recorded) numerics; the tape reuses these for forwards ──

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        // ikj order keeps both inner accesses contiguous.
        for i in 0..m {
            for kk in 0..k {
                let a = self.data[i * k + kk];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[kk * n..(kk + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += a * brow[j];
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape, other.shape, "add shapes");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape, other.shape, "sub shapes");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn hadamard(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape, other.shape, "hadamard shapes");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.iter().map(|v| v * c).collect())
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Row-wise softmax with row-max subtraction, so arbitrarily large logits
    /// stay finite.
    pub fn softmax_rows(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.data[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[i * c..(i + 1) * c];
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                orow[j] = e;
                sum += e;
            }
            for v in orow.iter_mut() {
                *v /= sum;
            }
        }
        Tensor::new(vec![r, c], out)
    }

    /// Columns `lo..hi` as a fresh tensor.
    pub fn col_slice(&self, lo: usize, hi: usize) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        assert!(lo <= hi && hi <= c, "column slice {lo}..{hi} of width {c}");
        let mut out = Vec::with_capacity(r * (hi - lo));
        for i in 0..r {
            out.extend_from_slice(&self.data[i * c + lo..i * c + hi]);
        }
        Tensor::new(vec![r, hi - lo], out)
    }

    pub fn expect_shape(&self, shape: &[usize], op: &'static str) -> Result<()> {
        if self.shape != shape {
            return Err(FetaError::shape(
                op,
                format!("expected {:?}, got {:?}", shape, self.shape),
            ));
        }
        Ok(())
    }
}
