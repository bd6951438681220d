//! Attention mechanisms producing row-stochastic maps over graph nodes.
//!
//! Three variants share one contract: every returned map C has non-negative
//! rows summing to 1, which by Gerschgorin keeps its spectral radius at most
//! 1. Masking (GAT neighborhoods, kernel zeros) is done by adding a constant
//! [`MASK_NEG`] to excluded logits before the row softmax; the constant is
//! large enough that f64 addition absorbs any realistic logit, so fully
//! masked rows collapse to uniform and excluded entries underflow to exact
//! zero.
//!
//! Head-level functions operate on tape [`Var`]s so gradients reach the
//! weights; the `*_attention` wrappers run the same code on a scratch tape
//! for callers that only need values.

use crate::error::{FetaError, Result};
use crate::graph::{eigendecompose, Graph, LaplacianMatrix, SpectralBasis};
use crate::tensor::{Tape, Tensor, Var};

/// Additive mask for excluded logits. Any |logit| below ~1e13 is absorbed
/// exactly by f64 rounding, so masked entries compare equal and softmax
/// treats them as tied minimums.
pub const MASK_NEG: f64 = -1e30;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum PeMode {
    None,
    /// Add projected Laplacian eigenvectors to the input features.
    LapStatic { k: usize },
    /// Modulate attention by the heat kernel exp(−βL).
    KernelDiffusion { beta: f64 },
    /// Modulate attention by (I − γL)^p.
    KernelRandomWalk { gamma: f64, p: usize },
}

#[derive(Debug, Clone)]
pub struct AttentionConfig {
    pub heads: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub tie_query_key: bool,
    pub pe: PeMode,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_in == 0 || self.d_out == 0 {
            return Err(FetaError::Config("heads and widths must be positive".into()));
        }
        Ok(())
    }
}

/// Per-head attention maps, each row-stochastic.
#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub heads: Vec<Tensor>,
}

impl AttentionMap {
    /// Checks non-negativity, row sums within 1e-10 of 1, and the
    /// Gerschgorin bound max_i Σ_j |C_ij| ≤ 1 + 1e-8.
    pub fn validate(&self) -> Result<()> {
        for (h, c) in self.heads.iter().enumerate() {
            let n = c.rows();
            c.expect_shape(&[n, n], "attention map")?;
            for i in 0..n {
                let mut sum = 0.0;
                let mut abs_sum = 0.0;
                for j in 0..n {
                    let v = c.at(i, j);
                    if v < -1e-12 {
                        return Err(FetaError::Contract(format!(
                            "head {h} row {i} has negative attention weight {v}"
                        )));
                    }
                    sum += v;
                    abs_sum += v.abs();
                }
                if (sum - 1.0).abs() > 1e-10 {
                    return Err(FetaError::Contract(format!(
                        "head {h} row {i} sums to {sum}, not stochastic"
                    )));
                }
                if abs_sum > 1.0 + 1e-8 {
                    return Err(FetaError::Contract(format!(
                        "head {h} row {i} breaks the spectral-radius bound: {abs_sum}"
                    )));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Scaled-dot attention

/// One head of transformer attention: C = softmax_rows(QKᵀ/√d_out),
/// X_out = CV with Q = XW_q, K = XW_k, V = XW_v. Tie queries and keys by
/// passing the same Var for `wq` and `wk`.
pub fn scaled_dot_head_var<'t>(
    x: Var<'t>,
    wq: Var<'t>,
    wk: Var<'t>,
    wv: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let d_in = x.shape()[1];
    let d_out = wq.shape()[1];
    for (name, w) in [("W_q", &wq), ("W_k", &wk), ("W_v", &wv)] {
        if w.shape()[0] != d_in {
            return Err(FetaError::shape(
                "scaled_dot_attention",
                format!("{name} is {:?} but input width is {d_in}", w.shape()),
            ));
        }
    }
    let q = x.matmul(wq);
    let k = x.matmul(wk);
    let logits = q.matmul(k.transpose()).scale(1.0 / (d_out as f64).sqrt());
    let c = logits.softmax_rows();
    let out = c.matmul(x.matmul(wv));
    Ok((c, out))
}

/// All heads of scaled-dot attention on plain tensors. `wk` is ignored when
/// `cfg.tie_query_key` is set.
pub fn scaled_dot_attention(
    cfg: &AttentionConfig,
    x: &Tensor,
    wq: &[Tensor],
    wk: &[Tensor],
    wv: &[Tensor],
) -> Result<(AttentionMap, Vec<Tensor>)> {
    cfg.validate()?;
    if wq.len() != cfg.heads || wv.len() != cfg.heads {
        return Err(FetaError::shape(
            "scaled_dot_attention",
            format!("expected {} heads of weights", cfg.heads),
        ));
    }
    if !cfg.tie_query_key && wk.len() != cfg.heads {
        return Err(FetaError::shape(
            "scaled_dot_attention",
            "untied keys need one W_k per head".to_string(),
        ));
    }
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let mut heads = Vec::new();
    let mut outs = Vec::new();
    for h in 0..cfg.heads {
        let wqv = tape.constant(wq[h].clone());
        let wkv = if cfg.tie_query_key { wqv } else { tape.constant(wk[h].clone()) };
        let wvv = tape.constant(wv[h].clone());
        let (c, out) = scaled_dot_head_var(xv, wqv, wkv, wvv)?;
        heads.push(c.value_clone());
        outs.push(out.value_clone());
    }
    let map = AttentionMap { heads };
    map.validate()?;
    Ok((map, outs))
}

// ---------------------------------------------------------------------------
// GAT attention

/// Additive neighborhood mask: 0 on edges and the diagonal, [`MASK_NEG`]
/// elsewhere. The mandatory self-loop keeps every row non-empty.
pub fn gat_mask(g: &Graph) -> Tensor {
    let n = g.n;
    let mut m = Tensor::filled(&[n, n], MASK_NEG);
    for i in 0..n {
        m.set(i, i, 0.0);
    }
    for &(i, j, w) in &g.edges {
        if w > 0.0 {
            m.set(i, j, 0.0);
            m.set(j, i, 0.0);
        }
    }
    m
}

/// One GAT head: z = XW, logits e_ij = LeakyReLU(aᵀ[z_i ‖ z_j]) on the
/// masked support, C = softmax_rows(e), output CZ. `a` is [2·d_out, 1]; its
/// top half scores the source node, the bottom half the target.
pub fn gat_head_var<'t>(
    mask: &Tensor,
    x: Var<'t>,
    w: Var<'t>,
    a: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let n = x.shape()[0];
    mask.expect_shape(&[n, n], "gat_attention")?;
    let d_out = w.shape()[1];
    if a.shape() != vec![2 * d_out, 1] {
        return Err(FetaError::shape(
            "gat_attention",
            format!("scoring vector is {:?}, want [{}, 1]", a.shape(), 2 * d_out),
        ));
    }
    let tape = x.tape();
    let z = x.matmul(w);
    let mut sel_l = Tensor::zeros(&[d_out, 2 * d_out]);
    let mut sel_r = Tensor::zeros(&[d_out, 2 * d_out]);
    for i in 0..d_out {
        sel_l.set(i, i, 1.0);
        sel_r.set(i, i + d_out, 1.0);
    }
    let a_l = tape.constant(sel_l).matmul(a);
    let a_r = tape.constant(sel_r).matmul(a);
    let s = z.matmul(a_l);
    let t = z.matmul(a_r);
    // Outer sum s_i + t_j through ones matrices.
    let row_ones = tape.constant(Tensor::ones(&[1, n]));
    let col_ones = tape.constant(Tensor::ones(&[n, 1]));
    let logits = s.matmul(row_ones).add(col_ones.matmul(t.transpose())).leaky_relu();
    let c = logits.add(tape.constant(mask.clone())).softmax_rows();
    let out = c.matmul(z);
    Ok((c, out))
}

pub fn gat_attention(
    cfg: &AttentionConfig,
    g: &Graph,
    x: &Tensor,
    w: &[Tensor],
    a: &[Tensor],
) -> Result<(AttentionMap, Vec<Tensor>)> {
    cfg.validate()?;
    if w.len() != cfg.heads || a.len() != cfg.heads {
        return Err(FetaError::shape(
            "gat_attention",
            format!("expected {} heads of weights", cfg.heads),
        ));
    }
    let mask = gat_mask(g);
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let mut heads = Vec::new();
    let mut outs = Vec::new();
    for h in 0..cfg.heads {
        let (c, out) = gat_head_var(
            &mask,
            xv,
            tape.constant(w[h].clone()),
            tape.constant(a[h].clone()),
        )?;
        heads.push(c.value_clone());
        outs.push(out.value_clone());
    }
    let map = AttentionMap { heads };
    map.validate()?;
    Ok((map, outs))
}

// ---------------------------------------------------------------------------
// Kernel-modulated attention

/// Builds the positional kernel for [`kernel_pe_attention`].
///
/// Diffusion: U·exp(−βΛ)·Uᵀ through the eigensolver. Random walk:
/// (I − γL)^p by repeated multiplication, requiring γ ≤ 1/λ_max so the
/// factor stays positive semi-definite. Entries in [−1e-12, 0) are rounding
/// residue and are clamped to zero.
pub fn build_pe_kernel(l: &LaplacianMatrix, mode: &PeMode) -> Result<Tensor> {
    let n = l.l.rows();
    match *mode {
        PeMode::KernelDiffusion { beta } => {
            if beta < 0.0 {
                return Err(FetaError::Domain(format!("diffusion rate {beta} is negative")));
            }
            let basis = eigendecompose(l)?;
            let mut diag = Tensor::zeros(&[n, n]);
            for (i, &lam) in basis.lambda.iter().enumerate() {
                diag.set(i, i, (-beta * lam).exp());
            }
            let mut k = basis.u.matmul(&diag).matmul(&basis.u.transpose());
            for v in &mut k.data {
                if *v < 0.0 && *v >= -1e-12 {
                    *v = 0.0;
                }
            }
            Ok(k)
        }
        PeMode::KernelRandomWalk { gamma, p } => {
            if gamma < 0.0 {
                return Err(FetaError::Domain(format!("walk step {gamma} is negative")));
            }
            let lambda_max = eigendecompose(l)?.lambda_max;
            if lambda_max > 1e-12 && gamma > 1.0 / lambda_max + 1e-12 {
                return Err(FetaError::Domain(format!(
                    "walk step {gamma} exceeds 1/lambda_max = {}; factor loses positive \
                     semi-definiteness",
                    1.0 / lambda_max
                )));
            }
            let mut factor = l.l.scale(-gamma);
            for i in 0..n {
                factor.set(i, i, factor.at(i, i) + 1.0);
            }
            let mut k = Tensor::eye(n);
            for _ in 0..p {
                k = k.matmul(&factor);
            }
            for v in &mut k.data {
                if *v < 0.0 && *v >= -1e-12 {
                    *v = 0.0;
                }
            }
            Ok(k)
        }
        _ => Err(FetaError::Contract(
            "build_pe_kernel needs a diffusion or random-walk mode".into(),
        )),
    }
}

/// One head of kernel-modulated attention with tied queries and keys:
/// C = row-normalize(exp(QQᵀ/√d_out) ⊙ K_p), realized as a softmax over
/// logits + ln K_p with zero-kernel entries masked. Rows whose kernel mass
/// is entirely zero fall back to uniform.
pub fn kernel_head_var<'t>(
    kp: &Tensor,
    x: Var<'t>,
    wq: Var<'t>,
    wv: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let n = x.shape()[0];
    kp.expect_shape(&[n, n], "kernel_pe_attention")?;
    for &v in &kp.data {
        if v < 0.0 {
            return Err(FetaError::Domain(format!("kernel entry {v} is negative")));
        }
    }
    let d_out = wq.shape()[1];
    let tape = x.tape();
    let mut mask = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let k = kp.at(i, j);
            mask.set(i, j, if k > 0.0 { k.ln() } else { MASK_NEG });
        }
    }
    let q = x.matmul(wq);
    let logits = q.matmul(q.transpose()).scale(1.0 / (d_out as f64).sqrt());
    let c = logits.add(tape.constant(mask)).softmax_rows();
    let out = c.matmul(x.matmul(wv));
    Ok((c, out))
}

pub fn kernel_pe_attention(
    cfg: &AttentionConfig,
    x: &Tensor,
    kp: &Tensor,
    wq: &[Tensor],
    wv: &[Tensor],
) -> Result<(AttentionMap, Vec<Tensor>)> {
    cfg.validate()?;
    if !cfg.tie_query_key {
        return Err(FetaError::Contract(
            "kernel-modulated attention requires tied query/key weights".into(),
        ));
    }
    if wq.len() != cfg.heads || wv.len() != cfg.heads {
        return Err(FetaError::shape(
            "kernel_pe_attention",
            format!("expected {} heads of weights", cfg.heads),
        ));
    }
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let mut heads = Vec::new();
    let mut outs = Vec::new();
    for h in 0..cfg.heads {
        let (c, out) = kernel_head_var(
            kp,
            xv,
            tape.constant(wq[h].clone()),
            tape.constant(wv[h].clone()),
        )?;
        heads.push(c.value_clone());
        outs.push(out.value_clone());
    }
    let map = AttentionMap { heads };
    map.validate()?;
    Ok((map, outs))
}

// ---------------------------------------------------------------------------
// Static Laplacian positional encoding

/// X + U[:, 1..=k]·diag(signs)·P with a learned projection P: the first k
/// non-trivial eigenvectors, sign-flipped per epoch to average out the
/// eigenvector sign ambiguity. `k = 0` returns X untouched.
pub fn lap_pe_var<'t>(
    basis: &SpectralBasis,
    signs: &[f64],
    k: usize,
    x: Var<'t>,
    proj: Var<'t>,
) -> Result<Var<'t>> {
    if k == 0 {
        return Ok(x);
    }
    let n = basis.n();
    if k + 1 > n {
        return Err(FetaError::Domain(format!(
            "{k} positional eigenvectors requested but only {} non-trivial ones exist",
            n.saturating_sub(1)
        )));
    }
    if signs.len() != k {
        return Err(FetaError::shape(
            "laplacian_pe_features",
            format!("{} signs for {k} eigenvectors", signs.len()),
        ));
    }
    let d = x.shape()[1];
    if proj.shape() != vec![k, d] {
        return Err(FetaError::shape(
            "laplacian_pe_features",
            format!("projection is {:?}, want [{k}, {d}]", proj.shape()),
        ));
    }
    let mut pe = Tensor::zeros(&[n, k]);
    for c in 0..k {
        for r in 0..n {
            pe.set(r, c, signs[c] * basis.u.at(r, c + 1));
        }
    }
    let tape = x.tape();
    Ok(x.add(tape.constant(pe).matmul(proj)))
}

/// Plain-tensor wrapper over [`lap_pe_var`].
pub fn laplacian_pe_features(
    basis: &SpectralBasis,
    x: &Tensor,
    k: usize,
    proj: &Tensor,
    signs: &[f64],
) -> Result<Tensor> {
    let tape = Tape::new();
    let out = lap_pe_var(
        basis,
        signs,
        k,
        tape.constant(x.clone()),
        tape.constant(proj.clone()),
    )?;
    Ok(out.value_clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_laplacian, LaplacianKind};

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    fn rand_tensor(shape: &[usize], seed: &mut u64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| lcg(seed)).collect())
    }

    fn cfg(heads: usize, d_in: usize, d_out: usize, tie: bool) -> AttentionConfig {
        AttentionConfig { heads, d_in, d_out, tie_query_key: tie, pe: PeMode::None }
    }

    #[test]
    fn zero_input_gives_uniform_attention() {
        let mut seed = 1u64;
        let c = cfg(2, 3, 4, false);
        let x = Tensor::zeros(&[5, 3]);
        let wq: Vec<_> = (0..2).map(|_| rand_tensor(&[3, 4], &mut seed)).collect();
        let wk: Vec<_> = (0..2).map(|_| rand_tensor(&[3, 4], &mut seed)).collect();
        let wv: Vec<_> = (0..2).map(|_| rand_tensor(&[3, 4], &mut seed)).collect();
        let (map, _) = scaled_dot_attention(&c, &x, &wq, &wk, &wv).unwrap();
        for head in &map.heads {
            for &v in &head.data {
                assert!((v - 0.2).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_node_attention_is_identity() {
        let mut seed = 2u64;
        let c = cfg(1, 3, 2, false);
        let x = rand_tensor(&[1, 3], &mut seed);
        let wq = [rand_tensor(&[3, 2], &mut seed)];
        let wk = [rand_tensor(&[3, 2], &mut seed)];
        let wv = [rand_tensor(&[3, 2], &mut seed)];
        let (map, outs) = scaled_dot_attention(&c, &x, &wq, &wk, &wv).unwrap();
        assert_eq!(map.heads[0].data, vec![1.0]);
        assert!(outs[0].sub(&x.matmul(&wv[0])).frob_norm() < 1e-15);
    }

    #[test]
    fn attention_maps_stay_stochastic_and_bounded() {
        // Gerschgorin bound over 200 random inputs across the variants.
        let mut seed = 3u64;
        for trial in 0..200 {
            let n = 2 + trial % 6;
            let x = rand_tensor(&[n, 3], &mut seed);
            let c = cfg(2, 3, 4, trial % 2 == 0);
            let wq: Vec<_> = (0..2).map(|_| rand_tensor(&[3, 4], &mut seed)).collect();
            let wk: Vec<_> = (0..2).map(|_| rand_tensor(&[3, 4], &mut seed)).collect();
            let wv: Vec<_> = (0..2).map(|_| rand_tensor(&[3, 4], &mut seed)).collect();
            let (map, _) = scaled_dot_attention(&c, &x, &wq, &wk, &wv).unwrap();
            map.validate().unwrap();
        }
    }

    #[test]
    fn scaled_dot_is_permutation_equivariant() {
        let mut seed = 11u64;
        for n in 2..=8usize {
            let x = rand_tensor(&[n, 3], &mut seed);
            let c = cfg(1, 3, 3, false);
            let wq = [rand_tensor(&[3, 3], &mut seed)];
            let wk = [rand_tensor(&[3, 3], &mut seed)];
            let wv = [rand_tensor(&[3, 3], &mut seed)];
            // Rotation permutation i → i+1 mod n.
            let mut p = Tensor::zeros(&[n, n]);
            for i in 0..n {
                p.set((i + 1) % n, i, 1.0);
            }
            let xp = p.matmul(&x);
            let (m1, o1) = scaled_dot_attention(&c, &x, &wq, &wk, &wv).unwrap();
            let (m2, o2) = scaled_dot_attention(&c, &xp, &wq, &wk, &wv).unwrap();
            let conj = p.matmul(&m1.heads[0]).matmul(&p.transpose());
            assert!(m2.heads[0].sub(&conj).frob_norm() < 1e-12);
            assert!(o2[0].sub(&p.matmul(&o1[0])).frob_norm() < 1e-12);
        }
    }

    #[test]
    fn gat_uniform_on_complete_graph_with_zero_scorer() {
        let mut seed = 7u64;
        let g = Graph::complete(4);
        let c = cfg(1, 3, 2, false);
        let x = rand_tensor(&[4, 3], &mut seed);
        let w = [rand_tensor(&[3, 2], &mut seed)];
        let a = [Tensor::zeros(&[4, 1])];
        let (map, _) = gat_attention(&c, &g, &x, &w, &a).unwrap();
        for &v in &map.heads[0].data {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn gat_isolated_node_attends_only_to_itself() {
        let mut seed = 8u64;
        let g = Graph::from_pairs(3, &[(0, 1)]).unwrap();
        let c = cfg(1, 2, 2, false);
        let x = rand_tensor(&[3, 2], &mut seed);
        let w = [rand_tensor(&[2, 2], &mut seed)];
        let a = [rand_tensor(&[4, 1], &mut seed)];
        let (map, _) = gat_attention(&c, &g, &x, &w, &a).unwrap();
        assert_eq!(map.heads[0].at(2, 0), 0.0);
        assert_eq!(map.heads[0].at(2, 1), 0.0);
        assert!((map.heads[0].at(2, 2) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gat_support_matches_neighborhoods_on_path() {
        let mut seed = 9u64;
        let g = Graph::path(3);
        let c = cfg(1, 2, 3, false);
        let x = rand_tensor(&[3, 2], &mut seed);
        let w = [rand_tensor(&[2, 3], &mut seed)];
        let a = [rand_tensor(&[6, 1], &mut seed)];
        let (map, _) = gat_attention(&c, &g, &x, &w, &a).unwrap();
        let m = &map.heads[0];
        assert_eq!(m.at(0, 2), 0.0);
        assert_eq!(m.at(2, 0), 0.0);
        for i in 0..3 {
            assert!(m.at(i, i) > 0.0);
        }
        assert!(m.at(0, 1) > 0.0 && m.at(1, 0) > 0.0 && m.at(1, 2) > 0.0 && m.at(2, 1) > 0.0);
    }

    #[test]
    fn diffusion_kernel_at_zero_rate_is_identity() {
        let g = Graph::path(4);
        let l = build_laplacian(&g, LaplacianKind::Normalized).unwrap();
        let k = build_pe_kernel(&l, &PeMode::KernelDiffusion { beta: 0.0 }).unwrap();
        assert!(k.sub(&Tensor::eye(4)).frob_norm() < 1e-10);
    }

    #[test]
    fn walk_kernel_degenerate_cases() {
        let g = Graph::path(4);
        let l = build_laplacian(&g, LaplacianKind::Normalized).unwrap();
        let k0 = build_pe_kernel(&l, &PeMode::KernelRandomWalk { gamma: 0.0, p: 3 }).unwrap();
        assert!(k0.sub(&Tensor::eye(4)).frob_norm() < 1e-12);
        let kp0 = build_pe_kernel(&l, &PeMode::KernelRandomWalk { gamma: 0.3, p: 0 }).unwrap();
        assert!(kp0.sub(&Tensor::eye(4)).frob_norm() < 1e-15);
        let k1 = build_pe_kernel(&l, &PeMode::KernelRandomWalk { gamma: 0.3, p: 1 }).unwrap();
        let mut want = l.l.scale(-0.3);
        for i in 0..4 {
            want.set(i, i, want.at(i, i) + 1.0);
        }
        // Clamping may zero rounding residue; compare up to that.
        assert!(k1.sub(&want).frob_norm() < 1e-12);
    }

    #[test]
    fn walk_kernel_rejects_oversized_step() {
        let g = Graph::path(4);
        let l = build_laplacian(&g, LaplacianKind::Normalized).unwrap();
        // Normalized path Laplacian has lambda_max well above 2/3.
        assert!(matches!(
            build_pe_kernel(&l, &PeMode::KernelRandomWalk { gamma: 1.5, p: 2 }),
            Err(FetaError::Domain(_))
        ));
    }

    #[test]
    fn neutral_kernel_reproduces_tied_scaled_dot_exactly() {
        let mut seed = 21u64;
        let c = cfg(2, 3, 4, true);
        let x = rand_tensor(&[5, 3], &mut seed);
        let wq: Vec<_> = (0..2).map(|_| rand_tensor(&[3, 4], &mut seed)).collect();
        let wv: Vec<_> = (0..2).map(|_| rand_tensor(&[3, 4], &mut seed)).collect();
        let ones = Tensor::ones(&[5, 5]);
        let (km, ko) = kernel_pe_attention(&c, &x, &ones, &wq, &wv).unwrap();
        let (sm, so) = scaled_dot_attention(&c, &x, &wq, &[], &wv).unwrap();
        for h in 0..2 {
            assert_eq!(km.heads[h].data, sm.heads[h].data);
            assert_eq!(ko[h].data, so[h].data);
        }
    }

    #[test]
    fn identity_kernel_gives_identity_attention() {
        let mut seed = 22u64;
        let c = cfg(1, 3, 2, true);
        let x = rand_tensor(&[4, 3], &mut seed);
        let wq = [rand_tensor(&[3, 2], &mut seed)];
        let wv = [rand_tensor(&[3, 2], &mut seed)];
        let (map, _) = kernel_pe_attention(&c, &x, &Tensor::eye(4), &wq, &wv).unwrap();
        assert!(map.heads[0].sub(&Tensor::eye(4)).frob_norm() < 1e-15);
    }

    #[test]
    fn attention_zeros_match_walk_kernel_sparsity() {
        // A 3-step walk on a 6-node path reaches exactly distance ≤ 3, so
        // attention must be zero precisely where |i − j| > 3.
        let g = Graph::path(6);
        let l = build_laplacian(&g, LaplacianKind::Normalized).unwrap();
        let kp = build_pe_kernel(&l, &PeMode::KernelRandomWalk { gamma: 0.4, p: 3 }).unwrap();
        let mut seed = 23u64;
        let c = cfg(1, 2, 3, true);
        let x = rand_tensor(&[6, 2], &mut seed);
        let wq = [rand_tensor(&[2, 3], &mut seed)];
        let wv = [rand_tensor(&[2, 3], &mut seed)];
        let (map, _) = kernel_pe_attention(&c, &x, &kp, &wq, &wv).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let far = (i as i64 - j as i64).abs() > 3;
                assert_eq!(kp.at(i, j) == 0.0, far, "kernel at ({i},{j})");
                if far {
                    assert_eq!(map.heads[0].at(i, j), 0.0);
                } else {
                    assert!(map.heads[0].at(i, j) > 0.0);
                }
            }
        }
        map.validate().unwrap();
    }

    #[test]
    fn negative_kernel_entry_is_rejected() {
        let mut seed = 24u64;
        let c = cfg(1, 2, 2, true);
        let x = rand_tensor(&[3, 2], &mut seed);
        let wq = [rand_tensor(&[2, 2], &mut seed)];
        let wv = [rand_tensor(&[2, 2], &mut seed)];
        let mut kp = Tensor::ones(&[3, 3]);
        kp.set(1, 2, -0.1);
        assert!(matches!(
            kernel_pe_attention(&c, &x, &kp, &wq, &wv),
            Err(FetaError::Domain(_))
        ));
    }

    #[test]
    fn lap_pe_zero_count_is_identity() {
        let g = Graph::path(4);
        let basis =
            eigendecompose(&build_laplacian(&g, LaplacianKind::Normalized).unwrap()).unwrap();
        let mut seed = 31u64;
        let x = rand_tensor(&[4, 3], &mut seed);
        let out = laplacian_pe_features(&basis, &x, 0, &Tensor::zeros(&[0, 0]), &[]).unwrap();
        assert_eq!(out.data, x.data);
    }

    #[test]
    fn lap_pe_identity_projection_adds_eigenvectors() {
        let g = Graph::path(5);
        let basis =
            eigendecompose(&build_laplacian(&g, LaplacianKind::Normalized).unwrap()).unwrap();
        let mut seed = 32u64;
        let x = rand_tensor(&[5, 2], &mut seed);
        let out =
            laplacian_pe_features(&basis, &x, 2, &Tensor::eye(2), &[1.0, 1.0]).unwrap();
        for i in 0..5 {
            assert!((out.at(i, 0) - x.at(i, 0) - basis.u.at(i, 1)).abs() < 1e-14);
            assert!((out.at(i, 1) - x.at(i, 1) - basis.u.at(i, 2)).abs() < 1e-14);
        }
    }

    #[test]
    fn lap_pe_sign_flip_changes_only_pe_term() {
        let g = Graph::path(5);
        let basis =
            eigendecompose(&build_laplacian(&g, LaplacianKind::Normalized).unwrap()).unwrap();
        let mut seed = 33u64;
        let x = rand_tensor(&[5, 2], &mut seed);
        let proj = rand_tensor(&[2, 2], &mut seed);
        let plus = laplacian_pe_features(&basis, &x, 2, &proj, &[1.0, 1.0]).unwrap();
        let minus = laplacian_pe_features(&basis, &x, 2, &proj, &[-1.0, 1.0]).unwrap();
        // Difference is 2·u₁·proj-row-0, independent of X.
        let diff = plus.sub(&minus);
        for i in 0..5 {
            for j in 0..2 {
                let want = 2.0 * basis.u.at(i, 1) * proj.at(0, j);
                assert!((diff.at(i, j) - want).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn lap_pe_rejects_too_many_eigenvectors() {
        let g = Graph::path(3);
        let basis =
            eigendecompose(&build_laplacian(&g, LaplacianKind::Normalized).unwrap()).unwrap();
        let x = Tensor::zeros(&[3, 2]);
        assert!(matches!(
            laplacian_pe_features(&basis, &x, 3, &Tensor::eye(3), &[1.0, 1.0, 1.0]),
            Err(FetaError::Domain(_))
        ));
    }
}
