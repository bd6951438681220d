//! Chebyshev polynomial graph filters and the ARMA rational alternative.
//!
//! A filter is a polynomial (or rational function) of the rescaled Laplacian
//! L̃ acting on node signals. Everything here evaluates through the
//! three-term recursion T₀ = 1, T₁ = x, T_k = 2xT_{k−1} − T_{k−2}; the full
//! matrices T_k(L̃) are never materialized beyond two work buffers, so a
//! filter application costs O(K·n²·d).

use crate::error::{FetaError, Result};
use crate::tensor::{Tensor, Var};

/// Polynomial filter coefficients α ∈ R^{K+1}; `alpha[k]` weights T_k.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterCoefficients {
    pub alpha: Vec<f64>,
}

impl FilterCoefficients {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(FetaError::Domain("empty coefficient vector".into()));
        }
        if alpha.iter().any(|a| !a.is_finite()) {
            return Err(FetaError::Domain("non-finite filter coefficient".into()));
        }
        Ok(FilterCoefficients { alpha })
    }

    /// α = e₀: identity on every signal regardless of the graph.
    pub fn all_pass(order: usize) -> Self {
        let mut alpha = vec![0.0; order + 1];
        alpha[0] = 1.0;
        FilterCoefficients { alpha }
    }

    pub fn order(&self) -> usize {
        self.alpha.len() - 1
    }
}

/// Sampled filter response over a grid in [−1, 1].
#[derive(Debug, Clone)]
pub struct FrequencyResponse {
    pub grid: Vec<f64>,
    pub magnitude: Vec<f64>,
}

/// Grid size used by the analysis pipeline; dense enough for order-≤8
/// polynomials while keeping plot files small.
pub const RESPONSE_GRID_POINTS: usize = 256;

/// Uniform grid of [`RESPONSE_GRID_POINTS`] samples spanning [−1, 1].
pub fn response_grid() -> Vec<f64> {
    let m = RESPONSE_GRID_POINTS;
    (0..m)
        .map(|j| -1.0 + 2.0 * j as f64 / (m - 1) as f64)
        .collect()
}

/// Rational filter as S parallel first-order sections: the output is
/// Σ_s b_s·y_s with y_s the fixed point of y = a_s·L̃y + X, approximated by
/// truncated iteration. |a_s| < 1 makes the iteration a contraction on the
/// [−1, 1] spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmaParams {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub iterations: usize,
}

pub const ARMA_DEFAULT_ITERATIONS: usize = 15;

impl ArmaParams {
    pub fn new(a: Vec<f64>, b: Vec<f64>, iterations: usize) -> Result<Self> {
        if a.len() != b.len() || a.is_empty() {
            return Err(FetaError::Domain(format!(
                "pole/gain length mismatch: {} vs {}",
                a.len(),
                b.len()
            )));
        }
        for &p in &a {
            if !(p.abs() < 1.0) {
                return Err(FetaError::Domain(format!(
                    "pole {p} has magnitude >= 1; fixed-point iteration would diverge"
                )));
            }
        }
        if b.iter().any(|g| !g.is_finite()) {
            return Err(FetaError::Domain("non-finite gain".into()));
        }
        Ok(ArmaParams { a, b, iterations })
    }
}

/// T_k at a scalar point via the recursion.
pub fn cheb_eval(k: usize, x: f64) -> f64 {
    match k {
        0 => 1.0,
        1 => x,
        _ => {
            let (mut prev2, mut prev) = (1.0, x);
            for _ in 2..=k {
                let next = 2.0 * x * prev - prev2;
                prev2 = prev;
                prev = next;
            }
            prev
        }
    }
}

/// T_k of a square matrix via the recursion.
pub fn cheb_eval_matrix(k: usize, x: &Tensor) -> Result<Tensor> {
    let n = x.rows();
    x.expect_shape(&[n, n], "cheb_eval_matrix")?;
    Ok(match k {
        0 => Tensor::eye(n),
        1 => x.clone(),
        _ => {
            let mut prev2 = Tensor::eye(n);
            let mut prev = x.clone();
            for _ in 2..=k {
                let next = x.matmul(&prev).scale(2.0).sub(&prev2);
                prev2 = prev;
                prev = next;
            }
            prev
        }
    })
}

/// Sample Σ_k α_k·T_k over `grid`; every point must lie in [−1, 1] up to a
/// 1e-9 slack for accumulated eigensolver error.
pub fn frequency_response(c: &FilterCoefficients, grid: &[f64]) -> Result<FrequencyResponse> {
    for &x in grid {
        if !(-1.0 - 1e-9..=1.0 + 1e-9).contains(&x) {
            return Err(FetaError::Domain(format!(
                "response grid point {x} outside [-1, 1]"
            )));
        }
    }
    let magnitude = grid
        .iter()
        .map(|&x| {
            let x = x.clamp(-1.0, 1.0);
            let mut acc = c.alpha[0];
            if c.alpha.len() > 1 {
                let (mut prev2, mut prev) = (1.0, x);
                acc += c.alpha[1] * prev;
                for &ak in &c.alpha[2..] {
                    let next = 2.0 * x * prev - prev2;
                    prev2 = prev;
                    prev = next;
                    acc += ak * prev;
                }
            }
            acc
        })
        .collect();
    Ok(FrequencyResponse { grid: grid.to_vec(), magnitude })
}

/// Σ_k α_k·T_k(L̃)·X by the vector recursion z₀ = X, z₁ = L̃X,
/// z_k = 2L̃z_{k−1} − z_{k−2}.
pub fn apply_filter(c: &FilterCoefficients, l_tilde: &Tensor, x: &Tensor) -> Result<Tensor> {
    let n = x.rows();
    l_tilde.expect_shape(&[n, n], "apply_filter")?;
    let mut out = x.scale(c.alpha[0]);
    if c.alpha.len() > 1 {
        let mut prev2 = x.clone();
        let mut prev = l_tilde.matmul(x);
        out = out.add(&prev.scale(c.alpha[1]));
        for &ak in &c.alpha[2..] {
            let next = l_tilde.matmul(&prev).scale(2.0).sub(&prev2);
            prev2 = prev;
            prev = next;
            if ak != 0.0 {
                out = out.add(&prev.scale(ak));
            }
        }
    }
    Ok(out)
}

/// Tape version of [`apply_filter`]; gradients flow into both `alpha`
/// (shape [K+1, 1]) and `x`. Coefficient k is pulled out of the vector with a
/// one-hot row so the whole filter stays inside the recorded primitive set.
pub fn apply_filter_var<'t>(alpha: Var<'t>, l_tilde: Var<'t>, x: Var<'t>) -> Result<Var<'t>> {
    let kp1 = alpha.shape()[0];
    if alpha.shape() != vec![kp1, 1] || kp1 == 0 {
        return Err(FetaError::shape(
            "apply_filter",
            format!("coefficients must be [K+1, 1], got {:?}", alpha.shape()),
        ));
    }
    let n = x.shape()[0];
    if l_tilde.shape() != vec![n, n] {
        return Err(FetaError::shape(
            "apply_filter",
            format!("laplacian {:?} vs signal {:?}", l_tilde.shape(), x.shape()),
        ));
    }
    let tape = alpha.tape();
    let pick = |k: usize| {
        let mut e = Tensor::zeros(&[1, kp1]);
        e.set(0, k, 1.0);
        tape.constant(e).matmul(alpha)
    };
    let mut out = x.mul(pick(0));
    if kp1 > 1 {
        let mut prev2 = x;
        let mut prev = l_tilde.matmul(x);
        out = out.add(prev.mul(pick(1)));
        for k in 2..kp1 {
            let next = l_tilde.matmul(prev).scale(2.0).sub(prev2);
            prev2 = prev;
            prev = next;
            out = out.add(prev.mul(pick(k)));
        }
    }
    Ok(out)
}

/// Σ_s b_s·y_s with y_s ← a_s·L̃y_s + X iterated `iterations` times from
/// y_s = X. Zero iterations collapses every branch to b_s·X.
pub fn arma_apply(p: &ArmaParams, l_tilde: &Tensor, x: &Tensor) -> Result<Tensor> {
    let n = x.rows();
    l_tilde.expect_shape(&[n, n], "arma_apply")?;
    for &pole in &p.a {
        if !(pole.abs() < 1.0) {
            return Err(FetaError::Domain(format!(
                "pole {pole} has magnitude >= 1; fixed-point iteration would diverge"
            )));
        }
    }
    let mut out = Tensor::zeros(&x.shape.clone());
    for (&a_s, &b_s) in p.a.iter().zip(&p.b) {
        let mut y = x.clone();
        for _ in 0..p.iterations {
            y = l_tilde.matmul(&y).scale(a_s).add(x);
        }
        out = out.add(&y.scale(b_s));
    }
    Ok(out)
}

/// Scalar response of the truncated rational filter at each grid point:
/// r(λ) = Σ_s b_s·y_s(λ) with y_s iterated y ← a_s·λ·y + 1 from y = 1,
/// mirroring [`arma_apply`] on the diagonalized operator.
pub fn rational_response(p: &ArmaParams, grid: &[f64]) -> Result<FrequencyResponse> {
    for &x in grid {
        if !(-1.0 - 1e-9..=1.0 + 1e-9).contains(&x) {
            return Err(FetaError::Domain(format!(
                "response grid point {x} outside [-1, 1]"
            )));
        }
    }
    let magnitude = grid
        .iter()
        .map(|&lam| {
            let lam = lam.clamp(-1.0, 1.0);
            let mut out = 0.0;
            for (&a_s, &b_s) in p.a.iter().zip(&p.b) {
                let mut y = 1.0;
                for _ in 0..p.iterations {
                    y = a_s * lam * y + 1.0;
                }
                out += b_s * y;
            }
            out
        })
        .collect();
    Ok(FrequencyResponse { grid: grid.to_vec(), magnitude })
}

/// Tape version of [`arma_apply`]; `a` and `b` are [S, 1] columns and
/// gradients flow through the unrolled iterations. Pole magnitudes are
/// checked against the current values (the tape is eager).
pub fn arma_apply_var<'t>(
    a: Var<'t>,
    b: Var<'t>,
    iterations: usize,
    l_tilde: Var<'t>,
    x: Var<'t>,
) -> Result<Var<'t>> {
    let s = a.shape()[0];
    if a.shape() != vec![s, 1] || b.shape() != vec![s, 1] || s == 0 {
        return Err(FetaError::shape(
            "arma_apply",
            format!("poles {:?} vs gains {:?}", a.shape(), b.shape()),
        ));
    }
    for i in 0..s {
        let pole = a.value().data[i];
        if !(pole.abs() < 1.0) {
            return Err(FetaError::Domain(format!(
                "pole {pole} has magnitude >= 1; fixed-point iteration would diverge"
            )));
        }
    }
    let tape = a.tape();
    let pick = |v: Var<'t>, k: usize| {
        let mut e = Tensor::zeros(&[1, s]);
        e.set(0, k, 1.0);
        tape.constant(e).matmul(v)
    };
    let mut out: Option<Var<'t>> = None;
    for i in 0..s {
        let a_i = pick(a, i);
        let b_i = pick(b, i);
        let mut y = x;
        for _ in 0..iterations {
            y = l_tilde.matmul(y).mul(a_i).add(x);
        }
        let term = y.mul(b_i);
        out = Some(match out {
            None => term,
            Some(acc) => acc.add(term),
        });
    }
    Ok(out.unwrap())
}

/// Least-squares fit of order-`order` Chebyshev coefficients to `target`
/// sampled on a uniform `grid_points`-point grid over [−1, 1]. Solves the
/// normal equations by Gaussian elimination with partial pivoting.
pub fn fit_chebyshev_lsq(
    target: &dyn Fn(f64) -> f64,
    order: usize,
    grid_points: usize,
) -> Result<FilterCoefficients> {
    if grid_points < order + 1 {
        return Err(FetaError::Domain(format!(
            "{grid_points} grid points cannot determine {} coefficients",
            order + 1
        )));
    }
    let grid: Vec<f64> = (0..grid_points)
        .map(|j| -1.0 + 2.0 * j as f64 / (grid_points - 1) as f64)
        .collect();
    let kp1 = order + 1;
    // Design matrix rows: (T₀(x), …, T_K(x)).
    let mut design = Tensor::zeros(&[grid_points, kp1]);
    for (r, &x) in grid.iter().enumerate() {
        design.set(r, 0, 1.0);
        if kp1 > 1 {
            design.set(r, 1, x);
            let (mut prev2, mut prev) = (1.0, x);
            for k in 2..kp1 {
                let next = 2.0 * x * prev - prev2;
                prev2 = prev;
                prev = next;
                design.set(r, k, prev);
            }
        }
    }
    let y = Tensor::col(&grid.iter().map(|&x| target(x)).collect::<Vec<_>>());
    let gram = design.transpose().matmul(&design);
    let rhs = design.transpose().matmul(&y);
    let alpha = solve_linear(&gram, &rhs)?;
    FilterCoefficients::new(alpha.data)
}

/// Dense solve of `m`·x = rhs (rhs a column) by partial-pivot elimination.
fn solve_linear(m: &Tensor, rhs: &Tensor) -> Result<Tensor> {
    let n = m.rows();
    m.expect_shape(&[n, n], "solve_linear")?;
    rhs.expect_shape(&[n, 1], "solve_linear")?;
    let mut a = m.clone();
    let mut b: Vec<f64> = rhs.data.clone();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&r1, &r2| a.at(r1, col).abs().partial_cmp(&a.at(r2, col).abs()).unwrap())
            .unwrap();
        if a.at(piv, col).abs() < 1e-13 {
            return Err(FetaError::Domain("singular normal-equation matrix".into()));
        }
        if piv != col {
            for j in 0..n {
                let tmp = a.at(col, j);
                a.set(col, j, a.at(piv, j));
                a.set(piv, j, tmp);
            }
            b.swap(col, piv);
        }
        for r in col + 1..n {
            let f = a.at(r, col) / a.at(col, col);
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                a.set(r, j, a.at(r, j) - f * a.at(col, j));
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let mut s = b[r];
        for j in r + 1..n {
            s -= a.at(r, j) * x[j];
        }
        x[r] = s / a.at(r, r);
    }
    Ok(Tensor::col(&x))
}
