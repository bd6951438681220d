//! Central-difference gradient verification.

use crate::error::{FetaError, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Compares tape gradients of `f` against central differences over every
/// entry of every parameter and returns the worst relative error, using
/// `|a − b| / max(|a|, |b|, 1e-6)`.
///
/// The floor reflects what the instrument can resolve: central differences
/// of an O(1) scalar quantize at ulp/(2·eps) ≈ 5e-12 per rounding step, so
/// gradients far below 1e-6 compare as noise. A systematic factor-two error
/// still exceeds a 1e-4 threshold for any gradient above 1e-10.
///
/// `f` must build a scalar from the given leaf vars and be deterministic;
/// determinism is enforced by running the forward pass twice and requiring
/// bit-identical values.
pub fn finite_diff_check<F>(params: &[Tensor], f: F, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(FetaError::Contract(format!(
            "finite_diff_check eps must lie in (0, 1e-2], got {eps}"
        )));
    }

    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = tensors.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = out.value();
        if !v.is_scalar() {
            return Err(FetaError::Contract(format!(
                "finite_diff_check target must be scalar, got {:?}",
                v.shape
            )));
        }
        Ok(v.data[0])
    };

    let base = eval(params)?;
    if eval(params)? != base {
        return Err(FetaError::Contract(
            "finite_diff_check target is non-deterministic".into(),
        ));
    }

    // Analytic gradients.
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let out = f(&tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| v.grad()).collect();

    let mut worst = 0.0f64;
    let mut perturbed: Vec<Tensor> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for ei in 0..param.numel() {
            let orig = param.data[ei];
            perturbed[pi].data[ei] = orig + eps;
            let up = eval(&perturbed)?;
            perturbed[pi].data[ei] = orig - eps;
            let down = eval(&perturbed)?;
            perturbed[pi].data[ei] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[pi].data[ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
