//! Adam over flat parameter lists.

use crate::error::{FetaError, Result};
use crate::tensor::Tensor;

/// Standard Adam with bias correction. One instance tracks moments for a
/// fixed list of parameters, matched to `step` calls by position.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            t: 0,
        }
    }

    pub fn for_params(lr: f64, params: &[Tensor]) -> Self {
        Adam::new(lr, &params.iter().map(|p| p.numel()).collect::<Vec<_>>())
    }

    /// One update; `grads[i]` must match `params[i]` elementwise.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(FetaError::Contract(format!(
                "optimizer tracks {} parameters, got {}/{}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            if p.numel() != self.m[i].len() || grads[i].numel() != self.m[i].len() {
                return Err(FetaError::Contract(format!(
                    "parameter {i} changed size: {} vs {}",
                    p.numel(),
                    self.m[i].len()
                )));
            }
            for (j, g) in grads[i].data.iter().enumerate() {
                let m = self.beta1 * self.m[i][j] + (1.0 - self.beta1) * g;
                let v = self.beta2 * self.v[i][j] + (1.0 - self.beta2) * g * g;
                self.m[i][j] = m;
                self.v[i][j] = v;
                p.data[j] -= self.lr * (m / bc1) / ((v / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
