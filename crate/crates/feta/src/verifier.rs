//! Numerical certification of the spectral expressiveness claims.
//!
//! The central object is the error functional E(C_t, C_g) = ‖C_t − UFUᵀ‖_F
//! between a convolution support C_t and the support induced by a desired
//! diagonal response F. This module computes:
//!
//! - the optimal unconstrained filter for a fixed support and its error;
//! - the minimum of E over row-stochastic C_t, via a closed form on the
//!   affine superset (rows summing to 1 with free sign) plus a
//!   projected-gradient solve on the true simplex constraint;
//! - the sandwich bounds min|f_i − 1| ≤ E ≤ max|f_i − 1|, which govern the
//!   affine closed form: since Σ_i ⟨1/√n, u_i⟩² = 1, the closed-form value
//!   is a convex combination of the |f_i − 1|. The simplex-constrained
//!   minimum can exceed the upper bound (the non-negativity constraint is
//!   active); reports carry both values and the measured excess so the
//!   distinction stays visible;
//! - a gradient-descent probe of the same minimum restricted to softmax
//!   attention maps (one-sided evidence);
//! - the analytic gradient/Hessian formulas for E² in the filter entries.

use crate::error::{FetaError, Result};
use crate::graph::{eigendecompose_symmetric, SpectralBasis};
use crate::optim::Adam;
use crate::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Closed-form identities must hold to this tolerance.
pub const SANDWICH_TOL: f64 = 1e-7;
/// A closed-form witness counts as simplex-feasible down to this dust level.
pub const FEASIBILITY_TOL: f64 = 1e-9;
/// Optimization-based agreement tolerance.
pub const OPT_TOL: f64 = 1e-5;
/// Search-based (one-sided) tolerance.
pub const SEARCH_TOL: f64 = 1e-3;

/// A desired diagonal frequency response over a fixed spectral basis.
#[derive(Debug, Clone)]
pub struct FilterTarget {
    pub f: Vec<f64>,
    pub basis: SpectralBasis,
}

impl FilterTarget {
    pub fn new(f: Vec<f64>, basis: SpectralBasis) -> Result<Self> {
        if f.len() != basis.n() {
            return Err(FetaError::shape(
                "filter_target",
                format!("{} response entries for {} eigenvectors", f.len(), basis.n()),
            ));
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(FetaError::Domain("non-finite response entry".into()));
        }
        Ok(FilterTarget { f, basis })
    }

    /// C_g = U·diag(f)·Uᵀ, the support realizing the response exactly.
    pub fn induced_support(&self) -> Tensor {
        let n = self.f.len();
        let mut uf = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for k in 0..n {
                uf.set(i, k, self.basis.u.at(i, k) * self.f[k]);
            }
        }
        uf.matmul(&self.basis.u.transpose())
    }

    /// (min, max) of |f_i − 1|: the sandwich bounds.
    pub fn bounds(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for &fi in &self.f {
            let d = (fi - 1.0).abs();
            lo = lo.min(d);
            hi = hi.max(d);
        }
        (lo, hi)
    }
}

/// Outcome of minimizing E over stochastic supports.
///
/// `e_affine` is the closed-form minimum over the affine set {C·1 = 1} and
/// always satisfies `lower − tol ≤ e_affine ≤ upper + tol`. `e_star` is the
/// best simplex-feasible value: equal to `e_affine` when the closed-form
/// witness already has non-negative entries, otherwise the projected-gradient
/// minimum, which may exceed `upper` by `constrained_excess`.
#[derive(Debug, Clone)]
pub struct ErrorReport {
    pub e_star: f64,
    pub e_affine: f64,
    pub lower: f64,
    pub upper: f64,
    pub witness: Tensor,
    pub feasible: bool,
    pub converged: bool,
    pub constrained_excess: f64,
}

/// ‖C_t − U·diag(f)·Uᵀ‖_F.
pub fn conv_support_error(c_t: &Tensor, target: &FilterTarget) -> Result<f64> {
    let n = target.f.len();
    c_t.expect_shape(&[n, n], "conv_support_error")?;
    Ok(c_t.sub(&target.induced_support()).frob_norm())
}

/// The error-minimizing diagonal response for a fixed support:
/// f*_i = u_iᵀC_t u_i, with minimum value √(‖C_t‖²_F − Σ f*_i²).
pub fn optimal_filter_for_support(
    c_t: &Tensor,
    basis: &SpectralBasis,
) -> Result<(Vec<f64>, f64)> {
    let n = basis.n();
    c_t.expect_shape(&[n, n], "optimal_filter_for_support")?;
    let d = basis.u.transpose().matmul(c_t).matmul(&basis.u);
    let f_star: Vec<f64> = (0..n).map(|i| d.at(i, i)).collect();
    let sq = c_t.frob_norm().powi(2) - f_star.iter().map(|v| v * v).sum::<f64>();
    Ok((f_star, sq.max(0.0).sqrt()))
}

/// Euclidean projection of each row onto the probability simplex.
pub fn project_rows_to_simplex(m: &Tensor) -> Tensor {
    let (r, c) = (m.rows(), m.cols());
    let mut out = Tensor::zeros(&[r, c]);
    for i in 0..r {
        let row: Vec<f64> = (0..c).map(|j| m.at(i, j)).collect();
        let mut sorted = row.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let mut cumsum = 0.0;
        let mut tau = 0.0;
        for (j, &uj) in sorted.iter().enumerate() {
            cumsum += uj;
            let t = (1.0 - cumsum) / (j as f64 + 1.0);
            if uj + t > 0.0 {
                tau = t;
            }
        }
        for j in 0..c {
            out.set(i, j, (row[j] + tau).max(0.0));
        }
    }
    out
}

/// Projected-gradient minimization of E² over row-stochastic matrices:
/// step 0.1/L (L = 2 for this quadratic) with halving backtracking, capped
/// at 10k iterations, multi-start. The first start is the row-projection of
/// the unconstrained optimum; the objective is convex, so every start heads
/// to the same global minimum and restarts only hedge numerical corners.
pub fn pgd_min_error(
    target: &FilterTarget,
    restarts: usize,
    seed: u64,
) -> Result<(f64, Tensor, bool)> {
    let n = target.f.len();
    let m = target.induced_support();
    let sq_err = |c: &Tensor| -> f64 {
        let d = c.sub(&m);
        d.data.iter().map(|v| v * v).sum()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Tensor)> = None;
    let mut any_converged = false;
    for r in 0..restarts.max(1) {
        let mut c = if r == 0 {
            project_rows_to_simplex(&m)
        } else {
            let raw = Tensor::new(
                vec![n, n],
                (0..n * n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            );
            raw.softmax_rows()
        };
        let mut obj = sq_err(&c);
        let base_step = 0.1 / 2.0;
        let mut converged = false;
        for _ in 0..10_000 {
            let grad = c.sub(&m).scale(2.0);
            let mut step = base_step;
            let mut cand = project_rows_to_simplex(&c.sub(&grad.scale(step)));
            let mut cand_obj = sq_err(&cand);
            while cand_obj > obj && step > 1e-12 {
                step *= 0.5;
                cand = project_rows_to_simplex(&c.sub(&grad.scale(step)));
                cand_obj = sq_err(&cand);
            }
            let moved = cand.sub(&c).frob_norm();
            let gained = obj - cand_obj;
            c = cand;
            obj = cand_obj;
            if moved < 1e-12 || gained < 1e-16 {
                converged = true;
                break;
            }
        }
        any_converged |= converged;
        if best.as_ref().map_or(true, |(b, _)| obj < *b) {
            best = Some((obj, c));
        }
    }
    let (obj, c) = best.unwrap();
    Ok((obj.sqrt(), c, any_converged))
}

/// Minimum of E over row-stochastic supports.
///
/// Closed form first: C* = M − (1/n)(M·1 − 1)·1ᵀ with M = UFUᵀ minimizes E
/// over the affine row-sum set. When that witness is entrywise non-negative
/// it is also the simplex optimum; otherwise projected gradient descent
/// supplies the feasible minimum (reported in `e_star` with the closed form
/// kept in `e_affine`).
pub fn min_error_over_stochastic(target: &FilterTarget) -> Result<ErrorReport> {
    let n = target.f.len();
    let m = target.induced_support();
    let nf = n as f64;
    let row_sums = m.matmul(&Tensor::ones(&[n, 1]));
    let mut witness = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let shift = (row_sums.at(i, 0) - 1.0) / nf;
        for j in 0..n {
            witness.set(i, j, m.at(i, j) - shift);
        }
    }
    let e_affine = witness.sub(&m).frob_norm();
    let feasible = witness.data.iter().all(|&v| v >= -FEASIBILITY_TOL);
    let (lower, upper) = target.bounds();
    if feasible {
        Ok(ErrorReport {
            e_star: e_affine,
            e_affine,
            lower,
            upper,
            witness,
            feasible,
            converged: true,
            constrained_excess: (e_affine - upper).max(0.0),
        })
    } else {
        let (e_star, pgd_witness, converged) = pgd_min_error(target, 20, 0x9D5E_ED)?;
        Ok(ErrorReport {
            e_star,
            e_affine,
            lower,
            upper,
            witness: pgd_witness,
            feasible,
            converged,
            constrained_excess: (e_star - upper).max(0.0),
        })
    }
}

/// [`min_error_over_stochastic`] plus hard assertions.
#[derive(Debug, Clone)]
pub struct BoundsCheck {
    pub report: ErrorReport,
    /// √(Σ (f_i − 1)²): the relaxed upper bound that any near-identity
    /// attention map already achieves.
    pub relaxed_upper: f64,
    pub attention_best: Option<f64>,
}

/// Certifies the sandwich min|f_i − 1| ≤ e_affine ≤ max|f_i − 1| (the bound
/// the closed form obeys; a violation is an implementation fault, reported
/// as a verification failure). Cross-checks that the eigenvalues of
/// U(F−I)Uᵀ are the f_i − 1, and optionally probes the attention subset:
/// the search result must stay within √(Σ(f_i−1)²) + tolerance and can
/// never undercut the stochastic minimum.
pub fn verify_error_bounds(
    target: &FilterTarget,
    attention_restarts: Option<usize>,
) -> Result<BoundsCheck> {
    let n = target.f.len();
    // Eigenvalues of U(F−I)Uᵀ, computed the long way as a basis check.
    let shifted = FilterTarget::new(
        target.f.iter().map(|v| v - 1.0).collect(),
        target.basis.clone(),
    )?;
    let eig = eigendecompose_symmetric(&shifted.induced_support())?;
    let mut expected: Vec<f64> = target.f.iter().map(|v| v - 1.0).collect();
    expected.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for (got, want) in eig.lambda.iter().zip(&expected) {
        if (got - want).abs() > 1e-8 {
            return Err(FetaError::Verification(format!(
                "eigenvalues of the shifted support drift from f_i - 1: {got} vs {want}"
            )));
        }
    }

    let report = min_error_over_stochastic(target)?;
    if report.e_affine < report.lower - SANDWICH_TOL
        || report.e_affine > report.upper + SANDWICH_TOL
    {
        return Err(FetaError::Verification(format!(
            "sandwich violated: {} not in [{}, {}]",
            report.e_affine, report.lower, report.upper
        )));
    }
    if report.e_star < report.e_affine - SANDWICH_TOL {
        return Err(FetaError::Verification(format!(
            "feasible minimum {} undercuts the affine relaxation {}",
            report.e_star, report.e_affine
        )));
    }

    let relaxed_upper = target
        .f
        .iter()
        .map(|v| (v - 1.0) * (v - 1.0))
        .sum::<f64>()
        .sqrt();
    let attention_best = match attention_restarts {
        None => None,
        Some(r) => {
            let best = attention_min_error_search(target, n, r)?;
            if best > relaxed_upper + SEARCH_TOL {
                return Err(FetaError::Verification(format!(
                    "attention search stalled above the relaxed bound: {best} > {relaxed_upper}"
                )));
            }
            if best < report.e_star - OPT_TOL {
                return Err(FetaError::Verification(format!(
                    "attention search {best} undercuts the stochastic minimum {}",
                    report.e_star
                )));
            }
            Some(best)
        }
    };
    Ok(BoundsCheck { report, relaxed_upper, attention_best })
}

/// Best-effort minimization of E over softmax attention supports
/// C = softmax_rows(XW_q(XW_k)ᵀ/√d) with free X, W_q, W_k.
///
/// Restart 0 starts at a saturated identity (possible when d ≥ n), whose
/// error is already √(Σ(f_i−1)²) up to softmax saturation residue; the rest
/// start from small random weights. Returns the best error found: an upper
/// bound on the attention-set minimum, one-sided evidence only.
pub fn attention_min_error_search(
    target: &FilterTarget,
    d: usize,
    restarts: usize,
) -> Result<f64> {
    let n = target.f.len();
    if d == 0 {
        return Err(FetaError::Domain("search width must be positive".into()));
    }
    let m = target.induced_support();
    let mut rng = ChaCha8Rng::seed_from_u64(0xA77E);
    let mut best = f64::INFINITY;
    for r in 0..restarts.max(1) {
        let mut params = if r == 0 && d >= n {
            // Saturated identity: X = [I 0], W_q = W_k = s·I with
            // s²/√d = 40, so logits are 40 on the diagonal and softmax is
            // the identity up to e⁻⁴⁰ mass.
            let mut x0 = Tensor::zeros(&[n, d]);
            for i in 0..n {
                x0.set(i, i, 1.0);
            }
            let s = (40.0 * (d as f64).sqrt()).sqrt();
            vec![x0, Tensor::eye(d).scale(s), Tensor::eye(d).scale(s)]
        } else {
            let mut t = |rows: usize, cols: usize| {
                Tensor::new(
                    vec![rows, cols],
                    (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
            };
            vec![t(n, d), t(d, d), t(d, d)]
        };
        let mut opt = Adam::for_params(0.05, &params);
        for _ in 0..600 {
            let tape = Tape::new();
            let x = tape.leaf(params[0].clone().with_grad());
            let wq = tape.leaf(params[1].clone().with_grad());
            let wk = tape.leaf(params[2].clone().with_grad());
            let logits = x
                .matmul(wq)
                .matmul(x.matmul(wk).transpose())
                .scale(1.0 / (d as f64).sqrt());
            let c = logits.softmax_rows();
            let loss = c.sub(tape.constant(m.clone())).frob_norm();
            let err = loss.scalar_value();
            if err < best {
                best = err;
            }
            tape.backward(loss)?;
            let grads = [x.grad(), wq.grad(), wk.grad()];
            opt.step(&mut params, &grads)?;
        }
    }
    Ok(best)
}

/// Analytic-vs-numeric agreement for the filter-entry derivatives of E².
#[derive(Debug, Clone)]
pub struct LemmaGradientReport {
    pub max_gradient_mismatch: f64,
    pub hessian_diag: Vec<f64>,
    pub min_hessian_diag: f64,
}

/// Checks ∂E²/∂f_i = −2(u_iᵀC_t u_i − f_i) against central differences and
/// the claimed Hessian diagonal 2·u_iᵀC_t u_i for non-negativity. Intended
/// for supports built with tied query/key weights, where the quadratic forms
/// are claimed non-negative.
pub fn check_lemma_gradients(
    c_t: &Tensor,
    target: &FilterTarget,
) -> Result<LemmaGradientReport> {
    let n = target.f.len();
    c_t.expect_shape(&[n, n], "check_lemma_gradients")?;
    let d = target.basis.u.transpose().matmul(c_t).matmul(&target.basis.u);
    let quad: Vec<f64> = (0..n).map(|i| d.at(i, i)).collect();

    let err_sq = |f: &[f64]| -> f64 {
        let t = FilterTarget::new(f.to_vec(), target.basis.clone()).unwrap();
        let e = c_t.sub(&t.induced_support()).frob_norm();
        e * e
    };
    let eps = 1e-5;
    let mut max_mismatch = 0.0f64;
    for i in 0..n {
        let analytic = -2.0 * (quad[i] - target.f[i]);
        let mut fp = target.f.clone();
        let mut fm = target.f.clone();
        fp[i] += eps;
        fm[i] -= eps;
        let numeric = (err_sq(&fp) - err_sq(&fm)) / (2.0 * eps);
        let mismatch = (analytic - numeric).abs() / analytic.abs().max(1.0);
        max_mismatch = max_mismatch.max(mismatch);
    }
    let hessian_diag: Vec<f64> = quad.iter().map(|q| 2.0 * q).collect();
    let min_hessian = hessian_diag.iter().cloned().fold(f64::INFINITY, f64::min);
    if max_mismatch >= 1e-6 {
        return Err(FetaError::Verification(format!(
            "gradient formula mismatch {max_mismatch:.3e}"
        )));
    }
    if min_hessian < -FEASIBILITY_TOL {
        return Err(FetaError::Verification(format!(
            "Hessian diagonal dips to {min_hessian:.3e}; quadratic form went negative"
        )));
    }
    Ok(LemmaGradientReport {
        max_gradient_mismatch: max_mismatch,
        hessian_diag,
        min_hessian_diag: min_hessian,
    })
}
