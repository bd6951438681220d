//! The full encoder and its training loop. Per layer and head, attention
//! produces a map C^h and output X^h; a coefficient GNN reads C^h and emits
//! per-graph filter coefficients; the filter runs on the input graph's
//! rescaled Laplacian over X^h. Head outputs are concatenated on both the
//! attention and filter branches, fused by a two-layer MLP over their
//! concatenation, then residual-added and layer-normalized. Ablations swap
//! the dynamic coefficients for static learnable ones, the Chebyshev filter
//! for a rational one, or remove the filter branch entirely (the vanilla
//! transformer path).

use std::path::Path;

use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{gat_head_var, gat_mask, kernel_head_var, lap_pe_var, scaled_dot_head_var, build_pe_kernel, PeMode};
use crate::cheb::{apply_filter_var, arma_apply_var, ARMA_DEFAULT_ITERATIONS};
use crate::coeffs::{dynamic_coefficients_var, orthogonality_penalty_var, CoeffGnnParams, CoeffGnnVars, DEFAULT_GNN_LAYERS};
use crate::error::{FetaError, Result};
use crate::graph::{build_laplacian, eigendecompose, rescale_spectrum, Graph, Labels, LaplacianKind, SpectralBasis};
use crate::optim::Adam;
use crate::tensor::{broadcast_rows, concat_cols, sum_all, Tape, Tensor, Var};

/// Poles of the rational filter are squashed to (−limit, limit) so the
/// fixed-point iteration always contracts.
pub const ARMA_POLE_LIMIT: f64 = 0.99;

/// Scalar twin of the in-model pole squash: ARMA_POLE_LIMIT·tanh(x) with
/// tanh written as 1 − 2·e^{−ln(e^{2x}+1)}, the exact operation sequence the
/// tape composes, so recomputation from logged coefficients is bitwise.
pub fn pole_squash(x: f64) -> f64 {
    let inv = (-((2.0 * x).exp() + 1.0).ln()).exp();
    (1.0 - 2.0 * inv) * ARMA_POLE_LIMIT
}

pub const CHECKPOINT_FORMAT_VERSION: &str = "feta-ckpt/1";

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterKind {
    /// Chebyshev filter with per-graph coefficients from the coefficient GNN.
    Chebyshev,
    /// Rational filter (parallel first-order branches), coefficients dynamic.
    Arma,
    /// Chebyshev filter with directly learnable per-head coefficients.
    StaticChebyshev,
    /// No filter branch: plain transformer encoder layer.
    None,
}

impl FilterKind {
    pub fn is_dynamic(self) -> bool {
        matches!(self, FilterKind::Chebyshev | FilterKind::Arma)
    }

    pub fn has_filter(self) -> bool {
        self != FilterKind::None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionKind {
    ScaledDot,
    Gat,
    KernelPe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    NodeClass,
    GraphClass,
    GraphRegress,
}

impl std::str::FromStr for FilterKind {
    type Err = FetaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chebyshev" => Ok(FilterKind::Chebyshev),
            "arma" => Ok(FilterKind::Arma),
            "static-chebyshev" => Ok(FilterKind::StaticChebyshev),
            "none" => Ok(FilterKind::None),
            other => Err(FetaError::Config(format!(
                "unknown filter kind {other:?} (chebyshev | arma | static-chebyshev | none)"
            ))),
        }
    }
}

impl std::fmt::Display for FilterKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FilterKind::Chebyshev => "chebyshev",
            FilterKind::Arma => "arma",
            FilterKind::StaticChebyshev => "static-chebyshev",
            FilterKind::None => "none",
        })
    }
}

impl std::str::FromStr for AttentionKind {
    type Err = FetaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scaled-dot" => Ok(AttentionKind::ScaledDot),
            "gat" => Ok(AttentionKind::Gat),
            "kernel-pe" => Ok(AttentionKind::KernelPe),
            other => Err(FetaError::Config(format!(
                "unknown attention kind {other:?} (scaled-dot | gat | kernel-pe)"
            ))),
        }
    }
}

impl std::fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttentionKind::ScaledDot => "scaled-dot",
            AttentionKind::Gat => "gat",
            AttentionKind::KernelPe => "kernel-pe",
        })
    }
}

impl std::str::FromStr for TaskKind {
    type Err = FetaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "node-class" => Ok(TaskKind::NodeClass),
            "graph-class" => Ok(TaskKind::GraphClass),
            "graph-regress" => Ok(TaskKind::GraphRegress),
            other => Err(FetaError::Config(format!(
                "unknown task {other:?} (node-class | graph-class | graph-regress)"
            ))),
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskKind::NodeClass => "node-class",
            TaskKind::GraphClass => "graph-class",
            TaskKind::GraphRegress => "graph-regress",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FetaConfig {
    pub layers: usize,
    /// Hidden width; split evenly across heads.
    pub d: usize,
    pub heads: usize,
    /// Filter order K (Chebyshev) or branch count S (rational).
    pub order: usize,
    pub filter: FilterKind,
    pub attention: AttentionKind,
    pub pe: PeMode,
    /// Weight of the head-coefficient orthogonality penalty.
    pub lambda_reg: f64,
    pub task: TaskKind,
    /// Input feature width.
    pub d_in: usize,
    /// Class count, or 1 for regression.
    pub out_width: usize,
    pub gnn_layers: usize,
    pub arma_iterations: usize,
}

impl FetaConfig {
    /// Benchmark-shaped defaults: 3 layers, width 64, 4 heads, order 8.
    pub fn benchmark_default(d_in: usize, out_width: usize) -> FetaConfig {
        FetaConfig {
            layers: 3,
            d: 64,
            heads: 4,
            order: 8,
            filter: FilterKind::Chebyshev,
            attention: AttentionKind::ScaledDot,
            pe: PeMode::None,
            lambda_reg: 1e-2,
            task: TaskKind::GraphClass,
            d_in,
            out_width,
            gnn_layers: DEFAULT_GNN_LAYERS,
            arma_iterations: ARMA_DEFAULT_ITERATIONS,
        }
    }

    /// Single-layer node-classification shape used by the synthetic suite.
    pub fn synthetic_default(classes: usize, d: usize, heads: usize, order: usize) -> FetaConfig {
        FetaConfig {
            layers: 1,
            d,
            heads,
            order,
            filter: FilterKind::Chebyshev,
            attention: AttentionKind::ScaledDot,
            pe: PeMode::None,
            lambda_reg: 1e-2,
            task: TaskKind::NodeClass,
            d_in: classes,
            out_width: classes,
            gnn_layers: DEFAULT_GNN_LAYERS,
            arma_iterations: ARMA_DEFAULT_ITERATIONS,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// Width of the coefficient vector the filter consumes: K+1 Chebyshev
    /// weights, or S poles followed by S gains for the rational filter.
    pub fn coeff_dim(&self) -> usize {
        match self.filter {
            FilterKind::Chebyshev | FilterKind::StaticChebyshev => self.order + 1,
            FilterKind::Arma => 2 * self.order,
            FilterKind::None => 0,
        }
    }

    /// Index of the coefficient whose initialization prior is 1 (the rest
    /// start at 0), making the initial filter all-pass.
    pub fn allpass_index(&self) -> usize {
        match self.filter {
            FilterKind::Arma => self.order,
            _ => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d == 0 || self.heads == 0 || self.order == 0 {
            return Err(FetaError::Config(
                "layers, width, heads and order must all be positive".into(),
            ));
        }
        if self.d % self.heads != 0 {
            return Err(FetaError::Config(format!(
                "width {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.d_in == 0 || self.out_width == 0 {
            return Err(FetaError::Config("input and output widths must be positive".into()));
        }
        if self.task == TaskKind::GraphRegress && self.out_width != 1 {
            return Err(FetaError::Config(format!(
                "regression head must have width 1, got {}",
                self.out_width
            )));
        }
        if !self.lambda_reg.is_finite() || self.lambda_reg < 0.0 {
            return Err(FetaError::Config(format!(
                "regularizer weight {} must be finite and non-negative",
                self.lambda_reg
            )));
        }
        let kernel_pe = matches!(
            self.pe,
            PeMode::KernelDiffusion { .. } | PeMode::KernelRandomWalk { .. }
        );
        if self.attention == AttentionKind::KernelPe && !kernel_pe {
            return Err(FetaError::Config(
                "kernel-pe attention needs a diffusion or random-walk kernel in `pe`".into(),
            ));
        }
        if self.attention != AttentionKind::KernelPe && kernel_pe {
            return Err(FetaError::Config(
                "kernel positional modes only apply to kernel-pe attention".into(),
            ));
        }
        if self.gnn_layers == 0 {
            return Err(FetaError::Config("coefficient GNN needs at least one layer".into()));
        }
        if self.arma_iterations == 0 {
            return Err(FetaError::Config("rational filter needs at least one iteration".into()));
        }
        Ok(())
    }
}

/// Readout shape implied by the task: node tasks keep per-node rows, graph
/// tasks mean-pool first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    Mean,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskHead {
    pub pooling: Pooling,
    pub out_width: usize,
}

impl TaskHead {
    pub fn for_config(cfg: &FetaConfig) -> TaskHead {
        TaskHead {
            pooling: match cfg.task {
                TaskKind::NodeClass => Pooling::None,
                TaskKind::GraphClass | TaskKind::GraphRegress => Pooling::Mean,
            },
            out_width: cfg.out_width,
        }
    }
}

// ---------------------------------------------------------------------------
// parameters

/// Flat named parameter storage in a fixed canonical order, so the optimizer,
/// gradient accumulation and checkpoints all index the same way.
#[derive(Debug, Clone)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn init(cfg: &FetaConfig, rng: &mut impl Rng) -> Result<ParamSet> {
        cfg.validate()?;
        let d = cfg.d;
        let dh = cfg.head_dim();
        let mut set = ParamSet { names: Vec::new(), tensors: Vec::new() };
        let uniform = |shape: &[usize], scale: f64, rng: &mut dyn rand::RngCore| {
            let count: usize = shape.iter().product();
            Tensor::new(
                shape.to_vec(),
                (0..count).map(|_| rng.gen_range(-scale..scale)).collect(),
            )
        };

        set.push("embed.w", uniform(&[cfg.d_in, d], 1.0 / (cfg.d_in as f64).sqrt(), rng));
        set.push("embed.b", Tensor::zeros(&[1, d]));
        if let PeMode::LapStatic { k } = cfg.pe {
            if k > 0 {
                set.push("pe.proj", uniform(&[k, d], 1.0 / (k as f64).sqrt(), rng));
            }
        }
        if cfg.filter.is_dynamic() {
            let gnn = CoeffGnnParams::init(cfg.coeff_dim(), cfg.gnn_layers, cfg.allpass_index(), rng)?;
            for (i, w) in gnn.w_p.iter().enumerate() {
                set.push(&format!("coeff.w_p{i}"), w.clone());
            }
            set.push("coeff.mlp_w1", gnn.mlp_w1);
            set.push("coeff.mlp_b1", gnn.mlp_b1);
            set.push("coeff.mlp_w2", gnn.mlp_w2);
            set.push("coeff.mlp_b2", gnn.mlp_b2);
        }
        let ws = 1.0 / (d as f64).sqrt();
        for l in 0..cfg.layers {
            for h in 0..cfg.heads {
                let key = |p: &str| format!("layer{l}.head{h}.{p}");
                match cfg.attention {
                    AttentionKind::ScaledDot => {
                        set.push(&key("w_q"), uniform(&[d, dh], ws, rng));
                        set.push(&key("w_k"), uniform(&[d, dh], ws, rng));
                        set.push(&key("w_v"), uniform(&[d, dh], ws, rng));
                    }
                    AttentionKind::Gat => {
                        set.push(&key("w"), uniform(&[d, dh], ws, rng));
                        set.push(&key("a"), uniform(&[2 * dh, 1], 1.0 / (2.0 * dh as f64).sqrt(), rng));
                    }
                    AttentionKind::KernelPe => {
                        set.push(&key("w_q"), uniform(&[d, dh], ws, rng));
                        set.push(&key("w_v"), uniform(&[d, dh], ws, rng));
                    }
                }
                if cfg.filter == FilterKind::StaticChebyshev {
                    // All-pass start: T₀ weight 1, the rest 0.
                    let mut alpha = Tensor::zeros(&[cfg.coeff_dim(), 1]);
                    alpha.set(0, 0, 1.0);
                    set.push(&key("alpha"), alpha);
                }
            }
            set.push(&format!("layer{l}.attn_out.w"), uniform(&[d, d], ws, rng));
            set.push(&format!("layer{l}.attn_out.b"), Tensor::zeros(&[1, d]));
            let fuse_in = if cfg.filter.has_filter() { 2 * d } else { d };
            set.push(
                &format!("layer{l}.fuse.w1"),
                uniform(&[fuse_in, d], 1.0 / (fuse_in as f64).sqrt(), rng),
            );
            set.push(&format!("layer{l}.fuse.b1"), Tensor::zeros(&[1, d]));
            set.push(&format!("layer{l}.fuse.w2"), uniform(&[d, d], ws, rng));
            set.push(&format!("layer{l}.fuse.b2"), Tensor::zeros(&[1, d]));
            set.push(&format!("layer{l}.norm.gain"), Tensor::ones(&[1, d]));
            set.push(&format!("layer{l}.norm.bias"), Tensor::zeros(&[1, d]));
        }
        set.push("head.w", uniform(&[d, cfg.out_width], ws, rng));
        set.push("head.b", Tensor::zeros(&[1, cfg.out_width]));
        Ok(set)
    }

    fn push(&mut self, name: &str, t: Tensor) {
        self.names.push(name.to_string());
        self.tensors.push(t);
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| FetaError::Contract(format!("no parameter named {name:?}")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.tensors[self.index_of(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let i = self.index_of(name)?;
        Ok(&mut self.tensors[i])
    }

    /// Registers every parameter as a gradient-bearing leaf on `tape`,
    /// in canonical order.
    pub fn vars<'p, 't>(&'p self, tape: &'t Tape) -> ParamVars<'p, 't> {
        ParamVars {
            set: self,
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone().with_grad())).collect(),
        }
    }

    /// Wraps externally created leaves (finite-difference checks hand these
    /// in) so the forward can resolve them by name.
    pub fn vars_from<'p, 't>(&'p self, vars: Vec<Var<'t>>) -> Result<ParamVars<'p, 't>> {
        if vars.len() != self.tensors.len() {
            return Err(FetaError::Contract(format!(
                "{} vars supplied for {} parameters",
                vars.len(),
                self.tensors.len()
            )));
        }
        Ok(ParamVars { set: self, vars })
    }
}

pub struct ParamVars<'p, 't> {
    set: &'p ParamSet,
    pub vars: Vec<Var<'t>>,
}

impl<'p, 't> ParamVars<'p, 't> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        Ok(self.vars[self.set.index_of(name)?])
    }

    fn coeff_gnn(&self, cfg: &FetaConfig) -> Result<CoeffGnnVars<'t>> {
        Ok(CoeffGnnVars {
            w_p: (0..cfg.gnn_layers)
                .map(|i| self.get(&format!("coeff.w_p{i}")))
                .collect::<Result<_>>()?,
            mlp_w1: self.get("coeff.mlp_w1")?,
            mlp_b1: self.get("coeff.mlp_b1")?,
            mlp_w2: self.get("coeff.mlp_w2")?,
            mlp_b2: self.get("coeff.mlp_b2")?,
        })
    }
}

// ---------------------------------------------------------------------------
// per-graph precomputation

/// Everything about one graph the forward pass reuses across epochs: the
/// spectral basis of the normalized Laplacian, the rescaled Laplacian the
/// filters run on, and attention-kind-specific masks/kernels.
#[derive(Debug, Clone)]
pub struct GraphContext {
    pub graph: Graph,
    pub basis: SpectralBasis,
    pub l_tilde: Tensor,
    pub gat_mask: Option<Tensor>,
    pub pe_kernel: Option<Tensor>,
}

impl GraphContext {
    pub fn prepare(cfg: &FetaConfig, g: &Graph) -> Result<GraphContext> {
        let lap = build_laplacian(g, LaplacianKind::Normalized)?;
        let basis = eigendecompose(&lap)?;
        let l_tilde = rescale_spectrum(&lap, basis.lambda_max)?;
        let gat = (cfg.attention == AttentionKind::Gat).then(|| gat_mask(g));
        let kernel = if cfg.attention == AttentionKind::KernelPe {
            Some(build_pe_kernel(&lap, &cfg.pe)?)
        } else {
            None
        };
        Ok(GraphContext {
            graph: g.clone(),
            basis,
            l_tilde,
            gat_mask: gat,
            pe_kernel: kernel,
        })
    }
}

// ---------------------------------------------------------------------------
// forward

/// tanh assembled from tape primitives: 1 − 2/(e^{2x} + 1). The inner log
/// argument is ≥ 1, so the chain stays finite for any coefficient magnitude
/// the optimizer reaches.
fn tanh_var<'t>(tape: &'t Tape, x: Var<'t>) -> Var<'t> {
    let ones = tape.constant(Tensor::ones(&x.shape()));
    let inv = x.scale(2.0).exp().add(ones).log().scale(-1.0).exp();
    ones.add(inv.scale(-2.0))
}

/// One encoder layer plus the intermediate branches tests inspect.
pub struct LayerTrace<'t> {
    pub output: Var<'t>,
    /// Per-head coefficient columns (empty when no filter runs).
    pub alphas: Vec<Var<'t>>,
    /// ‖_h X^h before the output projection.
    pub attention_concat: Var<'t>,
    /// ‖_h H^h, present when a filter runs.
    pub filtered_concat: Option<Var<'t>>,
}

pub fn encoder_layer_var<'t>(
    tape: &'t Tape,
    cfg: &FetaConfig,
    pv: &ParamVars<'_, 't>,
    ctx: &GraphContext,
    layer: usize,
    x: Var<'t>,
    coeff: Option<&CoeffGnnVars<'t>>,
    l_tilde: Var<'t>,
) -> Result<LayerTrace<'t>> {
    let n = ctx.graph.n;
    let l = layer;
    let mut x_heads = Vec::with_capacity(cfg.heads);
    let mut h_heads = Vec::with_capacity(cfg.heads);
    let mut alphas = Vec::new();
    for h in 0..cfg.heads {
        let key = |p: &str| format!("layer{l}.head{h}.{p}");
        let (c, xh) = match cfg.attention {
            AttentionKind::ScaledDot => scaled_dot_head_var(
                x,
                pv.get(&key("w_q"))?,
                pv.get(&key("w_k"))?,
                pv.get(&key("w_v"))?,
            )?,
            AttentionKind::Gat => {
                let mask = ctx.gat_mask.as_ref().ok_or_else(|| {
                    FetaError::Contract("graph context prepared without the GAT mask".into())
                })?;
                gat_head_var(mask, x, pv.get(&key("w"))?, pv.get(&key("a"))?)?
            }
            AttentionKind::KernelPe => {
                let kp = ctx.pe_kernel.as_ref().ok_or_else(|| {
                    FetaError::Contract("graph context prepared without the attention kernel".into())
                })?;
                kernel_head_var(kp, x, pv.get(&key("w_q"))?, pv.get(&key("w_v"))?)?
            }
        };
        match cfg.filter {
            FilterKind::None => {}
            FilterKind::Chebyshev => {
                let gnn = coeff.ok_or_else(|| {
                    FetaError::Contract("dynamic filter forward without coefficient GNN vars".into())
                })?;
                let alpha = dynamic_coefficients_var(gnn, c)?;
                h_heads.push(apply_filter_var(alpha, l_tilde, xh)?);
                alphas.push(alpha);
            }
            FilterKind::StaticChebyshev => {
                let alpha = pv.get(&key("alpha"))?;
                h_heads.push(apply_filter_var(alpha, l_tilde, xh)?);
                alphas.push(alpha);
            }
            FilterKind::Arma => {
                let gnn = coeff.ok_or_else(|| {
                    FetaError::Contract("dynamic filter forward without coefficient GNN vars".into())
                })?;
                let raw = dynamic_coefficients_var(gnn, c)?;
                let s = cfg.order;
                let select = |lo: usize| {
                    let mut m = Tensor::zeros(&[s, 2 * s]);
                    for i in 0..s {
                        m.set(i, lo + i, 1.0);
                    }
                    tape.constant(m)
                };
                let a = tanh_var(tape, select(0).matmul(raw)).scale(ARMA_POLE_LIMIT);
                let b = select(s).matmul(raw);
                h_heads.push(arma_apply_var(a, b, cfg.arma_iterations, l_tilde, xh)?);
                alphas.push(raw);
            }
        }
        x_heads.push(xh);
    }

    let x_cat = if x_heads.len() == 1 { x_heads[0] } else { concat_cols(&x_heads) };
    let x_proj = x_cat
        .matmul(pv.get(&format!("layer{l}.attn_out.w"))?)
        .add(broadcast_rows(pv.get(&format!("layer{l}.attn_out.b"))?, n));
    let h_cat = if h_heads.is_empty() {
        None
    } else if h_heads.len() == 1 {
        Some(h_heads[0])
    } else {
        Some(concat_cols(&h_heads))
    };
    let fuse_in = match h_cat {
        None => x_proj,
        Some(hc) => concat_cols(&[x_proj, hc]),
    };
    let hidden = fuse_in
        .matmul(pv.get(&format!("layer{l}.fuse.w1"))?)
        .add(broadcast_rows(pv.get(&format!("layer{l}.fuse.b1"))?, n))
        .relu();
    let fused = hidden
        .matmul(pv.get(&format!("layer{l}.fuse.w2"))?)
        .add(broadcast_rows(pv.get(&format!("layer{l}.fuse.b2"))?, n));
    let output = x.add(fused).layer_norm(
        pv.get(&format!("layer{l}.norm.gain"))?,
        pv.get(&format!("layer{l}.norm.bias"))?,
    );
    Ok(LayerTrace { output, alphas, attention_concat: x_cat, filtered_concat: h_cat })
}

pub struct ForwardArtifacts<'t> {
    pub encoded: Var<'t>,
    pub logits: Var<'t>,
    /// Per layer, per head coefficient columns.
    pub alphas: Vec<Vec<Var<'t>>>,
}

pub fn feta_forward<'t>(
    tape: &'t Tape,
    cfg: &FetaConfig,
    pv: &ParamVars<'_, 't>,
    ctx: &GraphContext,
) -> Result<ForwardArtifacts<'t>> {
    let n = ctx.graph.n;
    let feats = ctx.graph.x.as_ref().ok_or_else(|| {
        FetaError::Contract("forward pass on a graph without node features".into())
    })?;
    feats.expect_shape(&[n, cfg.d_in], "feta_forward")?;

    let mut x = tape
        .constant(feats.clone())
        .matmul(pv.get("embed.w")?)
        .add(broadcast_rows(pv.get("embed.b")?, n));
    if let PeMode::LapStatic { k } = cfg.pe {
        if k > 0 {
            let signs = vec![1.0; k];
            x = lap_pe_var(&ctx.basis, &signs, k, x, pv.get("pe.proj")?)?;
        }
    }

    let coeff = if cfg.filter.is_dynamic() { Some(pv.coeff_gnn(cfg)?) } else { None };
    let l_tilde = tape.constant(ctx.l_tilde.clone());
    let mut alphas = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let trace = encoder_layer_var(tape, cfg, pv, ctx, l, x, coeff.as_ref(), l_tilde)?;
        x = trace.output;
        alphas.push(trace.alphas);
    }

    let head = TaskHead::for_config(cfg);
    let (pooled, rows) = match head.pooling {
        Pooling::None => (x, n),
        Pooling::Mean => (x.mean_axis(0), 1),
    };
    let logits = pooled
        .matmul(pv.get("head.w")?)
        .add(broadcast_rows(pv.get("head.b")?, rows));
    Ok(ForwardArtifacts { encoded: x, logits, alphas })
}

/// One encoder layer on plain tensors (scratch tape inside); `x` is the layer
/// input of width `d`.
pub fn feta_layer_forward(
    cfg: &FetaConfig,
    params: &ParamSet,
    ctx: &GraphContext,
    layer: usize,
    x: &Tensor,
) -> Result<Tensor> {
    cfg.validate()?;
    let tape = Tape::new();
    let pv = params.vars(&tape);
    let coeff = if cfg.filter.is_dynamic() { Some(pv.coeff_gnn(cfg)?) } else { None };
    let trace = encoder_layer_var(
        &tape,
        cfg,
        &pv,
        ctx,
        layer,
        tape.constant(x.clone()),
        coeff.as_ref(),
        tape.constant(ctx.l_tilde.clone()),
    )?;
    Ok(trace.output.value_clone())
}

/// Same pipeline with the coefficient GNN bypassed: coefficients are the
/// per-head learnable parameters. Requires the static filter kind.
pub fn feta_static_forward(
    cfg: &FetaConfig,
    params: &ParamSet,
    ctx: &GraphContext,
    layer: usize,
    x: &Tensor,
) -> Result<Tensor> {
    if cfg.filter != FilterKind::StaticChebyshev {
        return Err(FetaError::Contract(format!(
            "static forward called with filter kind {}",
            cfg.filter
        )));
    }
    feta_layer_forward(cfg, params, ctx, layer, x)
}

/// Reference transformer encoder layer, written independently of the fused
/// path: multi-head attention, output projection, two-layer feed-forward,
/// residual add, layer-norm. With `filter = none` the fused path must match
/// this bit for bit.
pub fn vanilla_layer_forward(
    cfg: &FetaConfig,
    params: &ParamSet,
    ctx: &GraphContext,
    layer: usize,
    x: &Tensor,
) -> Result<Tensor> {
    let n = ctx.graph.n;
    let tape = Tape::new();
    let pv = params.vars(&tape);
    let xv = tape.constant(x.clone());
    let l = layer;
    let mut heads = Vec::new();
    for h in 0..cfg.heads {
        let key = |p: &str| format!("layer{l}.head{h}.{p}");
        let (_, xh) = match cfg.attention {
            AttentionKind::ScaledDot => scaled_dot_head_var(
                xv,
                pv.get(&key("w_q"))?,
                pv.get(&key("w_k"))?,
                pv.get(&key("w_v"))?,
            )?,
            AttentionKind::Gat => gat_head_var(
                ctx.gat_mask.as_ref().ok_or_else(|| {
                    FetaError::Contract("graph context prepared without the GAT mask".into())
                })?,
                xv,
                pv.get(&key("w"))?,
                pv.get(&key("a"))?,
            )?,
            AttentionKind::KernelPe => kernel_head_var(
                ctx.pe_kernel.as_ref().ok_or_else(|| {
                    FetaError::Contract("graph context prepared without the attention kernel".into())
                })?,
                xv,
                pv.get(&key("w_q"))?,
                pv.get(&key("w_v"))?,
            )?,
        };
        heads.push(xh);
    }
    let cat = if heads.len() == 1 { heads[0] } else { concat_cols(&heads) };
    let attn = cat
        .matmul(pv.get(&format!("layer{l}.attn_out.w"))?)
        .add(broadcast_rows(pv.get(&format!("layer{l}.attn_out.b"))?, n));
    let hidden = attn
        .matmul(pv.get(&format!("layer{l}.fuse.w1"))?)
        .add(broadcast_rows(pv.get(&format!("layer{l}.fuse.b1"))?, n))
        .relu();
    let ffn = hidden
        .matmul(pv.get(&format!("layer{l}.fuse.w2"))?)
        .add(broadcast_rows(pv.get(&format!("layer{l}.fuse.b2"))?, n));
    let out = xv.add(ffn).layer_norm(
        pv.get(&format!("layer{l}.norm.gain"))?,
        pv.get(&format!("layer{l}.norm.bias"))?,
    );
    Ok(out.value_clone())
}

// ---------------------------------------------------------------------------
// loss

/// Task loss plus the weighted head-orthogonality penalty.
///
/// Classification uses cross-entropy restricted to supervised rows (for node
/// tasks, the rows where `mask` is true; a missing mask supervises every
/// node). Regression uses the absolute error. Unsupervised rows are routed
/// through a harmless class-0 one-hot and zeroed by a row mask, so no
/// log(0) appears for them.
pub fn model_loss_var<'t>(
    tape: &'t Tape,
    cfg: &FetaConfig,
    logits: Var<'t>,
    labels: &Labels,
    mask: Option<&[bool]>,
    alphas: &[Vec<Var<'t>>],
) -> Result<Var<'t>> {
    let task = match (cfg.task, labels) {
        (TaskKind::NodeClass, Labels::NodeClasses(classes)) => {
            let rows = logits.shape()[0];
            let width = logits.shape()[1];
            if classes.len() != rows {
                return Err(FetaError::shape(
                    "model_loss",
                    format!("{} labels for {rows} logit rows", classes.len()),
                ));
            }
            let supervised: Vec<bool> = match mask {
                Some(m) => {
                    if m.len() != rows {
                        return Err(FetaError::shape(
                            "model_loss",
                            format!("mask length {} for {rows} rows", m.len()),
                        ));
                    }
                    m.to_vec()
                }
                None => vec![true; rows],
            };
            let m = supervised.iter().filter(|&&s| s).count();
            if m == 0 {
                return Err(FetaError::Domain("no supervised nodes in the loss".into()));
            }
            let mut one_hot = Tensor::zeros(&[rows, width]);
            let mut row_mask = Tensor::zeros(&[rows, 1]);
            for i in 0..rows {
                let c = classes[i];
                if c >= width {
                    return Err(FetaError::Domain(format!(
                        "label {c} out of range for {width} classes"
                    )));
                }
                one_hot.set(i, if supervised[i] { c } else { 0 }, 1.0);
                row_mask.set(i, 0, if supervised[i] { 1.0 } else { 0.0 });
            }
            let probs = logits.softmax_rows();
            let picked = probs
                .mul(tape.constant(one_hot))
                .matmul(tape.constant(Tensor::ones(&[width, 1])));
            sum_all(picked.log().mul(tape.constant(row_mask))).scale(-1.0 / m as f64)
        }
        (TaskKind::GraphClass, Labels::GraphClass(c)) => {
            let width = logits.shape()[1];
            logits.value().expect_shape(&[1, width], "model_loss")?;
            if *c >= width {
                return Err(FetaError::Domain(format!(
                    "label {c} out of range for {width} classes"
                )));
            }
            let mut one_hot = Tensor::zeros(&[1, width]);
            one_hot.set(0, *c, 1.0);
            let probs = logits.softmax_rows();
            let picked = probs
                .mul(tape.constant(one_hot))
                .matmul(tape.constant(Tensor::ones(&[width, 1])));
            sum_all(picked.log()).scale(-1.0)
        }
        (TaskKind::GraphRegress, Labels::GraphScalar(y)) => {
            logits.value().expect_shape(&[1, 1], "model_loss")?;
            crate::tensor::abs(logits.add(tape.constant_scalar(-y)))
        }
        (task, labels) => {
            return Err(FetaError::Contract(format!(
                "task {task} cannot score labels {labels:?}"
            )));
        }
    };

    let mut penalty: Option<Var<'t>> = None;
    for layer_alphas in alphas {
        if layer_alphas.len() < 2 {
            continue;
        }
        let stacked = concat_cols(layer_alphas);
        let p = orthogonality_penalty_var(stacked)?;
        penalty = Some(match penalty {
            None => p,
            Some(acc) => acc.add(p),
        });
    }
    Ok(match penalty {
        None => task,
        Some(p) => task.add(p.scale(cfg.lambda_reg)),
    })
}

/// Plain-tensor wrapper: `alphas` holds one [coeff_dim, heads] matrix per
/// layer.
pub fn model_loss(
    cfg: &FetaConfig,
    logits: &Tensor,
    labels: &Labels,
    mask: Option<&[bool]>,
    alphas: &[Tensor],
) -> Result<f64> {
    let tape = Tape::new();
    let mut alpha_vars = Vec::new();
    for stack in alphas {
        let heads = stack.cols();
        let cols: Vec<Var<'_>> = (0..heads)
            .map(|h| tape.constant(stack.col_slice(h, h + 1)))
            .collect();
        alpha_vars.push(cols);
    }
    let loss = model_loss_var(&tape, cfg, tape.constant(logits.clone()), labels, mask, &alpha_vars)?;
    Ok(loss.scalar_value())
}

// ---------------------------------------------------------------------------
// evaluation

#[derive(Debug, Clone, Serialize)]
pub struct AlphaRecord {
    /// Position of the graph within the evaluated slice.
    pub graph: usize,
    pub layer: usize,
    pub head: usize,
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub loss: f64,
    /// Higher-is-better scalar: accuracy for classification, −MAE for
    /// regression.
    pub score: f64,
    pub accuracy: Option<f64>,
    pub mae: Option<f64>,
    pub graphs: usize,
    pub alphas: Vec<AlphaRecord>,
}

pub fn evaluate(cfg: &FetaConfig, params: &ParamSet, graphs: &[Graph]) -> Result<EvalReport> {
    let ctxs: Vec<GraphContext> = graphs
        .iter()
        .map(|g| GraphContext::prepare(cfg, g))
        .collect::<Result<_>>()?;
    evaluate_contexts(cfg, params, &ctxs)
}

pub fn evaluate_contexts(
    cfg: &FetaConfig,
    params: &ParamSet,
    ctxs: &[GraphContext],
) -> Result<EvalReport> {
    cfg.validate()?;
    if ctxs.is_empty() {
        return Err(FetaError::Domain("nothing to evaluate".into()));
    }
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut counted = 0usize;
    let mut abs_err = 0.0;
    let mut alphas_out = Vec::new();
    for (gi, ctx) in ctxs.iter().enumerate() {
        let labels = ctx.graph.labels.as_ref().ok_or_else(|| {
            FetaError::Contract("evaluation graph carries no labels".into())
        })?;
        let tape = Tape::new();
        let pv = params.vars(&tape);
        let art = feta_forward(&tape, cfg, &pv, ctx)?;
        let loss = model_loss_var(&tape, cfg, art.logits, labels, ctx.graph.mask.as_deref(), &art.alphas)?;
        loss_sum += loss.scalar_value();
        let logits = art.logits.value_clone();
        match (cfg.task, labels) {
            (TaskKind::NodeClass, Labels::NodeClasses(classes)) => {
                let default_mask = vec![true; ctx.graph.n];
                let mask = ctx.graph.mask.as_deref().unwrap_or(&default_mask);
                for i in 0..ctx.graph.n {
                    if !mask[i] {
                        continue;
                    }
                    let row: Vec<f64> = (0..cfg.out_width).map(|c| logits.at(i, c)).collect();
                    let pred = argmax(&row);
                    counted += 1;
                    if pred == classes[i] {
                        correct += 1;
                    }
                }
            }
            (TaskKind::GraphClass, Labels::GraphClass(c)) => {
                let row: Vec<f64> = (0..cfg.out_width).map(|k| logits.at(0, k)).collect();
                counted += 1;
                if argmax(&row) == *c {
                    correct += 1;
                }
            }
            (TaskKind::GraphRegress, Labels::GraphScalar(y)) => {
                counted += 1;
                abs_err += (logits.at(0, 0) - y).abs();
            }
            (task, labels) => {
                return Err(FetaError::Contract(format!(
                    "task {task} cannot score labels {labels:?}"
                )));
            }
        }
        for (l, layer_alphas) in art.alphas.iter().enumerate() {
            for (h, a) in layer_alphas.iter().enumerate() {
                alphas_out.push(AlphaRecord {
                    graph: gi,
                    layer: l,
                    head: h,
                    alpha: a.value().data.clone(),
                });
            }
        }
    }
    let loss = loss_sum / ctxs.len() as f64;
    let (score, accuracy, mae) = match cfg.task {
        TaskKind::NodeClass | TaskKind::GraphClass => {
            let acc = correct as f64 / counted as f64;
            (acc, Some(acc), None)
        }
        TaskKind::GraphRegress => {
            let mae = abs_err / counted as f64;
            (-mae, None, Some(mae))
        }
    };
    Ok(EvalReport { loss, score, accuracy, mae, graphs: ctxs.len(), alphas: alphas_out })
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// training

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSettings {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before the rate halves.
    pub plateau_patience: usize,
    /// Epochs without validation improvement before training stops.
    pub early_stop_patience: usize,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 100,
            plateau_patience: 5,
            early_stop_patience: 15,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub valid_score: f64,
}

#[derive(Debug)]
pub struct TrainResult {
    /// Best-validation parameters.
    pub params: ParamSet,
    pub config: FetaConfig,
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_score: f64,
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(FetaError::Config(format!("learning rate {}", self.lr)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(FetaError::Config("batch size and epoch budget must be positive".into()));
        }
        Ok(())
    }
}

/// Full training run. Validation falls back to the training split when the
/// validation slice is empty (single-graph overfit checks). Deterministic
/// given (config, data, settings): all randomness flows from the seed.
pub fn train(
    cfg: &FetaConfig,
    train_graphs: &[Graph],
    valid_graphs: &[Graph],
    settings: &TrainSettings,
) -> Result<TrainResult> {
    cfg.validate()?;
    settings.validate()?;
    if train_graphs.is_empty() {
        return Err(FetaError::Config("empty training split".into()));
    }
    let train_ctx: Vec<GraphContext> = train_graphs
        .iter()
        .map(|g| GraphContext::prepare(cfg, g))
        .collect::<Result<_>>()?;
    let valid_ctx: Vec<GraphContext> = valid_graphs
        .iter()
        .map(|g| GraphContext::prepare(cfg, g))
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut params = ParamSet::init(cfg, &mut rng)?;
    let mut adam = Adam::for_params(settings.lr, params.tensors());
    let mut lr = settings.lr;

    let mut history = Vec::new();
    let mut best: Option<(ParamSet, usize, f64)> = None;
    let mut plateau = 0usize;
    let mut stale = 0usize;

    for epoch in 0..settings.max_epochs {
        let mut order: Vec<usize> = (0..train_ctx.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut loss_sum = 0.0;
        for batch in order.chunks(settings.batch_size) {
            let mut grads: Vec<Tensor> =
                params.tensors().iter().map(|t| Tensor::zeros(&t.shape)).collect();
            let weight = 1.0 / batch.len() as f64;
            for &gi in batch {
                let ctx = &train_ctx[gi];
                let labels = ctx.graph.labels.as_ref().ok_or_else(|| {
                    FetaError::Contract("training graph carries no labels".into())
                })?;
                let tape = Tape::new();
                let pv = params.vars(&tape);
                let art = feta_forward(&tape, cfg, &pv, ctx)?;
                let loss =
                    model_loss_var(&tape, cfg, art.logits, labels, ctx.graph.mask.as_deref(), &art.alphas)?;
                let value = loss.scalar_value();
                if !value.is_finite() {
                    return Err(FetaError::NumericalAbort(format!(
                        "loss {value} at epoch {epoch}, graph {gi}, lr {lr:.3e}; {}",
                        param_norm_snapshot(&params)
                    )));
                }
                loss_sum += value;
                tape.backward(loss)?;
                for (acc, var) in grads.iter_mut().zip(&pv.vars) {
                    let g = var.grad();
                    for (a, gv) in acc.data.iter_mut().zip(&g.data) {
                        *a += gv * weight;
                    }
                }
            }
            adam.lr = lr;
            adam.step(params.tensors_mut(), &grads)?;
        }
        let train_loss = loss_sum / train_ctx.len() as f64;

        let (valid_loss, valid_score) = if valid_ctx.is_empty() {
            let report = evaluate_contexts(cfg, &params, &train_ctx)?;
            (report.loss, report.score)
        } else {
            let report = evaluate_contexts(cfg, &params, &valid_ctx)?;
            (report.loss, report.score)
        };
        history.push(EpochMetrics { epoch, lr, train_loss, valid_loss, valid_score });

        let improved = match &best {
            None => true,
            Some((_, _, s)) => valid_score > *s + 1e-12,
        };
        if improved {
            best = Some((params.clone(), epoch, valid_score));
            plateau = 0;
            stale = 0;
        } else {
            plateau += 1;
            stale += 1;
            if plateau >= settings.plateau_patience {
                lr *= 0.5;
                plateau = 0;
            }
            if stale >= settings.early_stop_patience {
                break;
            }
        }
    }

    let (best_params, best_epoch, best_score) =
        best.ok_or_else(|| FetaError::Contract("no epoch completed".into()))?;
    Ok(TrainResult { params: best_params, config: cfg.clone(), history, best_epoch, best_score })
}

fn param_norm_snapshot(params: &ParamSet) -> String {
    let mut parts = Vec::new();
    for (name, t) in params.names().iter().zip(params.tensors()) {
        parts.push(format!("{name}={:.3e}", t.frob_norm()));
    }
    format!("parameter norms: {}", parts.join(", "))
}

// ---------------------------------------------------------------------------
// checkpoints (feta-ckpt/1)

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    version: String,
    config: FetaConfig,
    params: Vec<CheckpointParam>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointParam {
    name: String,
    shape: Vec<usize>,
    /// base64 of the little-endian float64 buffer.
    data: String,
}

pub fn save_checkpoint(cfg: &FetaConfig, params: &ParamSet, path: &Path) -> Result<()> {
    let engine = base64::engine::general_purpose::STANDARD;
    let doc = CheckpointDoc {
        version: CHECKPOINT_FORMAT_VERSION.to_string(),
        config: cfg.clone(),
        params: params
            .names()
            .iter()
            .zip(params.tensors())
            .map(|(name, t)| {
                let mut bytes = Vec::with_capacity(t.data.len() * 8);
                for v in &t.data {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                CheckpointParam {
                    name: name.clone(),
                    shape: t.shape.clone(),
                    data: engine.encode(bytes),
                }
            })
            .collect(),
    };
    let body = serde_json::to_string_pretty(&doc)
        .map_err(|e| FetaError::Config(format!("serialize checkpoint: {e}")))?;
    std::fs::write(path, body + "\n")?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(FetaConfig, ParamSet)> {
    let body = std::fs::read_to_string(path)?;
    let doc: CheckpointDoc = serde_json::from_str(&body)
        .map_err(|e| FetaError::Config(format!("{}: bad checkpoint: {e}", path.display())))?;
    if doc.version != CHECKPOINT_FORMAT_VERSION {
        return Err(FetaError::Config(format!(
            "checkpoint format {:?} not supported (expected {:?})",
            doc.version, CHECKPOINT_FORMAT_VERSION
        )));
    }
    doc.config.validate()?;
    let engine = base64::engine::general_purpose::STANDARD;
    let mut set = ParamSet { names: Vec::new(), tensors: Vec::new() };
    for p in doc.params {
        let bytes = engine
            .decode(&p.data)
            .map_err(|e| FetaError::Config(format!("parameter {}: bad base64: {e}", p.name)))?;
        let count: usize = p.shape.iter().product();
        if bytes.len() != count * 8 {
            return Err(FetaError::Config(format!(
                "parameter {}: {} bytes for shape {:?}",
                p.name,
                bytes.len(),
                p.shape
            )));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        set.push(&p.name, Tensor::new(p.shape, data));
    }
    // The stored parameter list must line up with what the config implies.
    let mut probe_rng = ChaCha8Rng::seed_from_u64(0);
    let expected = ParamSet::init(&doc.config, &mut probe_rng)?;
    if expected.names() != set.names() {
        return Err(FetaError::Config(
            "checkpoint parameters do not match its config (names differ)".into(),
        ));
    }
    for (name, (a, b)) in set.names().iter().zip(set.tensors().iter().zip(expected.tensors())) {
        if a.shape != b.shape {
            return Err(FetaError::Config(format!(
                "parameter {name}: shape {:?} but config implies {:?}",
                a.shape, b.shape
            )));
        }
    }
    Ok((doc.config, set))
}

// ---------------------------------------------------------------------------
