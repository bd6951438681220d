//! From attention maps to filter coefficients.
//!
//! Each head's attention map is reinterpreted as a weighted graph: symmetrize,
//! add self-loops, take the normalized Laplacian. A small GNN message-passes
//! node states (initialized to all-ones) over that Laplacian and a mean-pooled
//! two-layer MLP reads out the coefficient vector. One parameter set is shared
//! by every head at every layer.
//!
//! The readout bias initializes to a one-hot vector so the model starts as an
//! exact all-pass filter (identity on signals) and learns to sharpen from
//! there.

use crate::error::{FetaError, Result};
use crate::tensor::{Tape, Tensor, Var};
use rand::Rng;

/// Shared coefficient-GNN weights: `w_p[l]` per message-passing layer, then a
/// Linear→ReLU→Linear readout. All square in the coefficient dimension
/// (K+1 for polynomial filters, 2S for rational ones).
#[derive(Debug, Clone)]
pub struct CoeffGnnParams {
    pub w_p: Vec<Tensor>,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
}

/// Message-passing depth used when a config does not override it; two hops
/// over the complete weighted attention graph already mix globally.
pub const DEFAULT_GNN_LAYERS: usize = 2;

impl CoeffGnnParams {
    /// `allpass_index` marks the coefficient-vector entry whose readout bias
    /// starts at 1 (index 0 makes a polynomial filter the identity; rational
    /// layouts point it at the first gain). Hidden weights start small so the
    /// prior dominates the first steps.
    pub fn init(
        coeff_dim: usize,
        layers: usize,
        allpass_index: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if coeff_dim == 0 || allpass_index >= coeff_dim {
            return Err(FetaError::Config(format!(
                "coefficient dim {coeff_dim} with prior index {allpass_index}"
            )));
        }
        let mut rand_t = |shape: &[usize], scale: f64| {
            let n: usize = shape.iter().product();
            Tensor::new(
                shape.to_vec(),
                (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
            )
        };
        let w_p = (0..layers).map(|_| rand_t(&[coeff_dim, coeff_dim], 0.1)).collect();
        let mlp_w1 = rand_t(&[coeff_dim, coeff_dim], 0.1);
        let mlp_w2 = rand_t(&[coeff_dim, coeff_dim], 0.01);
        let mut mlp_b2 = Tensor::zeros(&[1, coeff_dim]);
        mlp_b2.set(0, allpass_index, 1.0);
        Ok(CoeffGnnParams {
            w_p,
            mlp_w1,
            mlp_b1: Tensor::zeros(&[1, coeff_dim]),
            mlp_w2,
            mlp_b2,
        })
    }

    pub fn coeff_dim(&self) -> usize {
        self.mlp_w1.rows()
    }

    /// Registers every parameter as a gradient-bearing leaf on `tape`.
    pub fn vars<'t>(&self, tape: &'t Tape) -> CoeffGnnVars<'t> {
        CoeffGnnVars {
            w_p: self.w_p.iter().map(|w| tape.leaf(w.clone().with_grad())).collect(),
            mlp_w1: tape.leaf(self.mlp_w1.clone().with_grad()),
            mlp_b1: tape.leaf(self.mlp_b1.clone().with_grad()),
            mlp_w2: tape.leaf(self.mlp_w2.clone().with_grad()),
            mlp_b2: tape.leaf(self.mlp_b2.clone().with_grad()),
        }
    }
}

/// Tape handles to one [`CoeffGnnParams`] instance.
#[derive(Clone)]
pub struct CoeffGnnVars<'t> {
    pub w_p: Vec<Var<'t>>,
    pub mlp_w1: Var<'t>,
    pub mlp_b1: Var<'t>,
    pub mlp_w2: Var<'t>,
    pub mlp_b2: Var<'t>,
}

/// Normalized Laplacian of the graph an attention map induces: symmetrize
/// A' = (C + Cᵀ)/2, add self-loops A'' = A' + I, return
/// I − D″^{−1/2} A″ D″^{−1/2}. Fully differentiable in C; the self-loop
/// keeps every degree at least 1, so the log/exp route to D^{−1/2} is safe.
pub fn attention_to_laplacian_var(c: Var<'_>) -> Result<Var<'_>> {
    let n = c.shape()[0];
    if c.shape() != vec![n, n] {
        return Err(FetaError::shape(
            "attention_to_laplacian",
            format!("attention map is {:?}", c.shape()),
        ));
    }
    {
        let v = c.value();
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..n {
                let e = v.at(i, j);
                if e < -1e-12 {
                    return Err(FetaError::Contract(format!(
                        "attention entry ({i},{j}) = {e} is negative"
                    )));
                }
                row += e;
            }
            if (row - 1.0).abs() > 1e-8 {
                return Err(FetaError::Contract(format!(
                    "attention row {i} sums to {row}, not stochastic"
                )));
            }
        }
    }
    let tape = c.tape();
    let eye = tape.constant(Tensor::eye(n));
    let a_sym = c.add(c.transpose()).scale(0.5);
    let a_loop = a_sym.add(eye);
    let d = a_loop.matmul(tape.constant(Tensor::ones(&[n, 1])));
    let t = d.log().scale(-0.5).exp();
    Ok(eye.sub(t.matmul(t.transpose()).mul(a_loop)))
}

/// Plain-tensor wrapper over [`attention_to_laplacian_var`].
pub fn attention_to_laplacian(c: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    Ok(attention_to_laplacian_var(tape.constant(c.clone()))?.value_clone())
}

/// One GNN layer: state′ = ReLU(L_att · state · W_p).
pub fn coeff_message_pass_var<'t>(
    w_p: Var<'t>,
    l_att: Var<'t>,
    state: Var<'t>,
) -> Result<Var<'t>> {
    let width = state.shape()[1];
    if w_p.shape() != vec![width, width] {
        return Err(FetaError::shape(
            "coeff_message_pass",
            format!("state width {width} vs weights {:?}", w_p.shape()),
        ));
    }
    Ok(l_att.matmul(state).matmul(w_p).relu())
}

/// Mean-pool the node states and push through the two-layer readout;
/// returns the coefficient vector as a [dim, 1] column.
pub fn coeff_readout_var<'t>(p: &CoeffGnnVars<'t>, state: Var<'t>) -> Result<Var<'t>> {
    let width = state.shape()[1];
    if p.mlp_w1.shape() != vec![width, width] {
        return Err(FetaError::shape(
            "coeff_readout",
            format!("state width {width} vs readout {:?}", p.mlp_w1.shape()),
        ));
    }
    let pooled = state.mean_axis(0);
    let hidden = pooled.matmul(p.mlp_w1).add(p.mlp_b1).relu();
    Ok(hidden.matmul(p.mlp_w2).add(p.mlp_b2).transpose())
}

/// Full bridge for one head: attention map → Laplacian → `layers` rounds of
/// message passing from all-ones states → readout.
pub fn dynamic_coefficients_var<'t>(p: &CoeffGnnVars<'t>, c_head: Var<'t>) -> Result<Var<'t>> {
    let n = c_head.shape()[0];
    let l_att = attention_to_laplacian_var(c_head)?;
    let tape = c_head.tape();
    let mut state = tape.constant(Tensor::ones(&[n, p.mlp_w1.shape()[0]]));
    for w in &p.w_p {
        state = coeff_message_pass_var(*w, l_att, state)?;
    }
    coeff_readout_var(p, state)
}

/// ‖(AᵀA) ⊙ (11ᵀ − I)‖_F for head coefficients in columns: zero exactly when
/// the per-head coefficient vectors are pairwise orthogonal, and identically
/// zero for a single head.
pub fn orthogonality_penalty_var(alphas: Var<'_>) -> Result<Var<'_>> {
    let h = alphas.shape()[1];
    let tape = alphas.tape();
    let mut mask = Tensor::ones(&[h, h]);
    for i in 0..h {
        mask.set(i, i, 0.0);
    }
    let gram = alphas.transpose().matmul(alphas);
    Ok(gram.mul(tape.constant(mask)).frob_norm())
}

/// Plain-tensor wrapper over [`orthogonality_penalty_var`].
pub fn orthogonality_penalty(alphas: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    Ok(orthogonality_penalty_var(tape.constant(alphas.clone()))?.scalar_value())
}
