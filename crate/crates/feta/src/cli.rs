//! Command implementations behind the `feta` binary: flat key = value
//! configuration, dataset/checkpoint plumbing, the frequency-response
//! analyzer, and the theorem-verification battery. Every command writes its
//! resolved configuration into the output directory and is byte-deterministic
//! given (args, seed).

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::cheb::{
    frequency_response, rational_response, response_grid, ArmaParams, FilterCoefficients,
};
use crate::error::{FetaError, Result};
use crate::graph::{build_laplacian, eigendecompose, Graph, LaplacianKind, SpectralBasis};
use crate::model::{
    evaluate_contexts, load_checkpoint, pole_squash, save_checkpoint, train, AttentionKind,
    FetaConfig, FilterKind, GraphContext, ParamSet, TaskKind, TrainSettings,
};
use crate::synthetic::{
    build_synthetic_dataset, canonical_preset_name, derive_stream, generate_sbm, load_dataset,
    save_dataset, DatasetSplit, SBMConfig,
};
use crate::tensor::{Tape, Tensor};
use crate::verifier::{check_lemma_gradients, verify_error_bounds, FilterTarget};
use crate::attention::PeMode;

/// Exit code the binary maps each failure onto: verification failures 1,
/// numerical aborts 3, everything else (usage, config, I/O) 2.
pub fn exit_code_for(err: &FetaError) -> u8 {
    match err {
        FetaError::Verification(_) => 1,
        FetaError::NumericalAbort(_) => 3,
        _ => 2,
    }
}

// ---------------------------------------------------------------------------
// run configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = FetaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "valid" => Ok(SplitName::Valid),
            "test" => Ok(SplitName::Test),
            other => Err(FetaError::Config(format!(
                "unknown split {other:?} (train | valid | test)"
            ))),
        }
    }
}

impl std::fmt::Display for SplitName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Valid => "valid",
            SplitName::Test => "test",
        })
    }
}

/// Everything a command run needs, resolved from the config file plus CLI
/// overrides. `explicit` remembers which keys were actually written down, so
/// compatibility checks only fire on intentional settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub split: SplitName,
    // model shape
    pub layers: usize,
    pub d: usize,
    pub heads: usize,
    pub order: usize,
    pub filter: FilterKind,
    pub attention: AttentionKind,
    pub pe: String,
    pub pe_k: usize,
    pub pe_beta: f64,
    pub pe_gamma: f64,
    pub pe_p: usize,
    pub lambda_reg: f64,
    pub task: TaskKind,
    pub d_in: usize,
    pub out_width: usize,
    pub gnn_layers: usize,
    pub arma_iterations: usize,
    // optimization
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    // verification battery
    pub instances: usize,
    pub restarts: usize,
    /// Test hook: deliberately reports instance 0 as a bound violation so the
    /// failure path (exit 1) can be exercised end to end.
    pub break_bound: bool,
    pub explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: "Synthetic_1".into(),
            dataset: None,
            checkpoint: None,
            out: None,
            seed: 0,
            split: SplitName::Test,
            layers: 1,
            d: 16,
            heads: 1,
            order: 4,
            filter: FilterKind::Chebyshev,
            attention: AttentionKind::ScaledDot,
            pe: "none".into(),
            pe_k: 8,
            pe_beta: 1.0,
            pe_gamma: 0.5,
            pe_p: 1,
            lambda_reg: 1e-2,
            task: TaskKind::NodeClass,
            d_in: 0,
            out_width: 0,
            gnn_layers: 2,
            arma_iterations: 15,
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 100,
            plateau_patience: 5,
            early_stop_patience: 15,
            instances: 40,
            restarts: 6,
            break_bound: false,
            explicit: BTreeSet::new(),
        }
    }
}

impl RunConfig {
    /// Parses the flat `key = value` format. Blank lines and `#` comments
    /// are ignored; unknown and duplicate keys are rejected.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                FetaError::Config(format!("line {}: expected `key = value`, got {line:?}", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            cfg.apply(key, value)
                .map_err(|e| FetaError::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        if !self.explicit.insert(key.to_string()) {
            return Err(FetaError::Config(format!("duplicate config key {key:?}")));
        }
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            v.parse::<T>()
                .map_err(|e| FetaError::Config(format!("key {key:?}: bad value {v:?}: {e}")))
        }
        match key {
            "preset" => self.preset = canonical_preset_name(value)?.to_string(),
            "dataset" => self.dataset = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "seed" => self.seed = num(key, value)?,
            "split" => self.split = value.parse()?,
            "layers" => self.layers = num(key, value)?,
            "d" => self.d = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "order" => self.order = num(key, value)?,
            "filter" => self.filter = value.parse()?,
            "attention" => self.attention = value.parse()?,
            "pe" => {
                if !["none", "lap-static", "kernel-diffusion", "kernel-random-walk"]
                    .contains(&value)
                {
                    return Err(FetaError::Config(format!(
                        "unknown positional-encoding mode {value:?}"
                    )));
                }
                self.pe = value.to_string();
            }
            "pe_k" => self.pe_k = num(key, value)?,
            "pe_beta" => self.pe_beta = num(key, value)?,
            "pe_gamma" => self.pe_gamma = num(key, value)?,
            "pe_p" => self.pe_p = num(key, value)?,
            "lambda_reg" => self.lambda_reg = num(key, value)?,
            "task" => self.task = value.parse()?,
            "d_in" => self.d_in = num(key, value)?,
            "out_width" => self.out_width = num(key, value)?,
            "gnn_layers" => self.gnn_layers = num(key, value)?,
            "arma_iterations" => self.arma_iterations = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "max_epochs" => self.max_epochs = num(key, value)?,
            "plateau_patience" => self.plateau_patience = num(key, value)?,
            "early_stop_patience" => self.early_stop_patience = num(key, value)?,
            "instances" => self.instances = num(key, value)?,
            "restarts" => self.restarts = num(key, value)?,
            "break_bound" => self.break_bound = num(key, value)?,
            other => return Err(FetaError::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Emits the resolved configuration in the same format [`parse`] reads;
    /// the round trip is identity (up to the `explicit` bookkeeping).
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("preset", self.preset.clone());
        if let Some(p) = &self.dataset {
            kv("dataset", p.display().to_string());
        }
        if let Some(p) = &self.checkpoint {
            kv("checkpoint", p.display().to_string());
        }
        if let Some(p) = &self.out {
            kv("out", p.display().to_string());
        }
        kv("seed", self.seed.to_string());
        kv("split", self.split.to_string());
        kv("layers", self.layers.to_string());
        kv("d", self.d.to_string());
        kv("heads", self.heads.to_string());
        kv("order", self.order.to_string());
        kv("filter", self.filter.to_string());
        kv("attention", self.attention.to_string());
        kv("pe", self.pe.clone());
        kv("pe_k", self.pe_k.to_string());
        kv("pe_beta", self.pe_beta.to_string());
        kv("pe_gamma", self.pe_gamma.to_string());
        kv("pe_p", self.pe_p.to_string());
        kv("lambda_reg", self.lambda_reg.to_string());
        kv("task", self.task.to_string());
        kv("d_in", self.d_in.to_string());
        kv("out_width", self.out_width.to_string());
        kv("gnn_layers", self.gnn_layers.to_string());
        kv("arma_iterations", self.arma_iterations.to_string());
        kv("lr", self.lr.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("max_epochs", self.max_epochs.to_string());
        kv("plateau_patience", self.plateau_patience.to_string());
        kv("early_stop_patience", self.early_stop_patience.to_string());
        kv("instances", self.instances.to_string());
        kv("restarts", self.restarts.to_string());
        kv("break_bound", self.break_bound.to_string());
        s
    }

    fn pe_mode(&self) -> PeMode {
        match self.pe.as_str() {
            "lap-static" => PeMode::LapStatic { k: self.pe_k },
            "kernel-diffusion" => PeMode::KernelDiffusion { beta: self.pe_beta },
            "kernel-random-walk" => PeMode::KernelRandomWalk { gamma: self.pe_gamma, p: self.pe_p },
            _ => PeMode::None,
        }
    }

    /// Assembles the model configuration; zero `d_in`/`out_width` derive from
    /// the dataset's class count.
    pub fn model_config(&self, classes: usize) -> Result<FetaConfig> {
        let cfg = FetaConfig {
            layers: self.layers,
            d: self.d,
            heads: self.heads,
            order: self.order,
            filter: self.filter,
            attention: self.attention,
            pe: self.pe_mode(),
            lambda_reg: self.lambda_reg,
            task: self.task,
            d_in: if self.d_in == 0 { classes } else { self.d_in },
            out_width: if self.out_width == 0 { classes } else { self.out_width },
            gnn_layers: self.gnn_layers,
            arma_iterations: self.arma_iterations,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            lr: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            plateau_patience: self.plateau_patience,
            early_stop_patience: self.early_stop_patience,
            seed: self.seed,
        }
    }

    fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| FetaError::Config("no output directory (use --out or `out =`)".into()))
    }

    fn obtain_dataset(&self) -> Result<DatasetSplit> {
        match &self.dataset {
            Some(path) => load_dataset(path),
            None => build_synthetic_dataset(&self.preset, self.seed),
        }
    }

    fn select_split<'a>(&self, ds: &'a DatasetSplit) -> &'a [crate::synthetic::SyntheticGraph] {
        match self.split {
            SplitName::Train => &ds.train,
            SplitName::Valid => &ds.valid,
            SplitName::Test => &ds.test,
        }
    }
}

fn write_run_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("run-config.txt"), cfg.serialize())?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

// ---------------------------------------------------------------------------
// commands

pub fn cmd_generate_data(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir()?.to_path_buf();
    let split = build_synthetic_dataset(&cfg.preset, cfg.seed)?;
    save_dataset(&split, &out)?;
    write_run_config(cfg, &out)?;
    println!(
        "wrote {} dataset ({} train / {} valid / {} test graphs) to {}",
        split.preset,
        split.train.len(),
        split.valid.len(),
        split.test.len(),
        out.display()
    );
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir()?.to_path_buf();
    let ds = cfg.obtain_dataset()?;
    let model_cfg = cfg.model_config(ds.classes)?;
    let settings = cfg.train_settings();
    let train_graphs: Vec<Graph> = ds.train.iter().map(|g| g.graph.clone()).collect();
    let valid_graphs: Vec<Graph> = ds.valid.iter().map(|g| g.graph.clone()).collect();
    let result = train(&model_cfg, &train_graphs, &valid_graphs, &settings)?;

    std::fs::create_dir_all(&out)?;
    save_checkpoint(&model_cfg, &result.params, &out.join("model.ckpt"))?;
    let mut w = csv::Writer::from_path(out.join("metrics.csv"))?;
    w.write_record(["epoch", "lr", "train_loss", "valid_loss", "valid_score"])?;
    for m in &result.history {
        w.write_record([
            m.epoch.to_string(),
            m.lr.to_string(),
            m.train_loss.to_string(),
            m.valid_loss.to_string(),
            m.valid_score.to_string(),
        ])?;
    }
    w.flush()?;

    let test_ctx: Vec<GraphContext> = ds
        .test
        .iter()
        .map(|g| GraphContext::prepare(&model_cfg, &g.graph))
        .collect::<Result<_>>()?;
    let report = evaluate_contexts(&model_cfg, &result.params, &test_ctx)?;
    let mut w = csv::Writer::from_path(out.join("test-metrics.csv"))?;
    w.write_record(["loss", "score", "accuracy", "mae", "graphs"])?;
    w.write_record([
        report.loss.to_string(),
        report.score.to_string(),
        fmt_opt(report.accuracy),
        fmt_opt(report.mae),
        report.graphs.to_string(),
    ])?;
    w.flush()?;
    write_run_config(cfg, &out)?;

    println!(
        "trained {} epochs; best epoch {} (validation score {})",
        result.history.len(),
        result.best_epoch,
        result.best_score
    );
    println!(
        "test: loss {} score {} accuracy {} over {} graphs",
        report.loss,
        report.score,
        fmt_opt(report.accuracy),
        report.graphs
    );
    println!("artifacts in {}", out.display());
    Ok(())
}

fn load_checkpoint_for(cfg: &RunConfig) -> Result<(FetaConfig, ParamSet)> {
    let path = cfg
        .checkpoint
        .as_deref()
        .ok_or_else(|| FetaError::Config("no checkpoint (use `checkpoint =`)".into()))?;
    load_checkpoint(path)
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir()?.to_path_buf();
    let (model_cfg, params) = load_checkpoint_for(cfg)?;
    let ds = cfg.obtain_dataset()?;
    if model_cfg.d_in != ds.classes {
        return Err(FetaError::Config(format!(
            "checkpoint expects {} input features but the dataset provides {} classes",
            model_cfg.d_in, ds.classes
        )));
    }
    let graphs = cfg.select_split(&ds);
    let ctxs: Vec<GraphContext> = graphs
        .iter()
        .map(|g| GraphContext::prepare(&model_cfg, &g.graph))
        .collect::<Result<_>>()?;
    let report = evaluate_contexts(&model_cfg, &params, &ctxs)?;

    std::fs::create_dir_all(&out)?;
    let mut w = csv::Writer::from_path(out.join("eval-metrics.csv"))?;
    w.write_record(["split", "loss", "score", "accuracy", "mae", "graphs"])?;
    w.write_record([
        cfg.split.to_string(),
        report.loss.to_string(),
        report.score.to_string(),
        fmt_opt(report.accuracy),
        fmt_opt(report.mae),
        report.graphs.to_string(),
    ])?;
    w.flush()?;
    write_run_config(cfg, &out)?;
    println!(
        "{}: loss {} score {} accuracy {} over {} graphs",
        cfg.split,
        report.loss,
        report.score,
        fmt_opt(report.accuracy),
        report.graphs
    );
    Ok(())
}

/// Response samples for one coefficient column under the checkpoint's filter
/// kind, over `grid`. Rational coefficients are logged raw; poles are
/// re-squashed here with the bit-identical scalar twin of the model path.
pub fn response_for(cfg: &FetaConfig, alpha: &[f64], grid: &[f64]) -> Result<Vec<f64>> {
    if alpha.len() != cfg.coeff_dim() {
        return Err(FetaError::shape(
            "response_for",
            format!("{} coefficients for width {}", alpha.len(), cfg.coeff_dim()),
        ));
    }
    match cfg.filter {
        FilterKind::Chebyshev | FilterKind::StaticChebyshev => {
            let c = FilterCoefficients::new(alpha.to_vec())?;
            Ok(frequency_response(&c, grid)?.magnitude)
        }
        FilterKind::Arma => {
            let s = cfg.order;
            let a: Vec<f64> = alpha[..s].iter().map(|&x| pole_squash(x)).collect();
            let b = alpha[s..].to_vec();
            let p = ArmaParams::new(a, b, cfg.arma_iterations)?;
            Ok(rational_response(&p, grid)?.magnitude)
        }
        FilterKind::None => Err(FetaError::Config(
            "checkpoint has no filter branch to analyze".into(),
        )),
    }
}

/// Scaled eigenvalue grid of one graph: λ̃_i = 2λ_i/λ_max − 1 ∈ [−1, 1].
fn scaled_eigs(basis: &SpectralBasis) -> Vec<f64> {
    basis
        .lambda
        .iter()
        .map(|&l| (2.0 * l / basis.lambda_max - 1.0).clamp(-1.0, 1.0))
        .collect()
}

pub fn cmd_analyze_filters(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir()?.to_path_buf();
    let (model_cfg, params) = load_checkpoint_for(cfg)?;
    // Only explicitly configured shape keys are compared; the checkpoint is
    // otherwise self-describing.
    let mismatches: Vec<(&str, String, String)> = [
        ("heads", cfg.heads.to_string(), model_cfg.heads.to_string()),
        ("order", cfg.order.to_string(), model_cfg.order.to_string()),
        ("layers", cfg.layers.to_string(), model_cfg.layers.to_string()),
        ("d", cfg.d.to_string(), model_cfg.d.to_string()),
        ("filter", cfg.filter.to_string(), model_cfg.filter.to_string()),
    ]
    .into_iter()
    .filter(|(key, want, got)| cfg.explicit.contains(*key) && want != got)
    .map(|(key, want, got)| (key, want, got))
    .collect();
    if let Some((key, want, got)) = mismatches.first() {
        return Err(FetaError::Config(format!(
            "config sets {key} = {want} but the checkpoint was trained with {key} = {got}"
        )));
    }
    if model_cfg.filter == FilterKind::None {
        return Err(FetaError::Config(
            "checkpoint has no filter branch to analyze".into(),
        ));
    }

    let ds = cfg.obtain_dataset()?;
    if model_cfg.d_in != ds.classes {
        return Err(FetaError::Config(format!(
            "checkpoint expects {} input features but the dataset provides {} classes",
            model_cfg.d_in, ds.classes
        )));
    }
    let graphs = cfg.select_split(&ds);
    if graphs.is_empty() {
        return Err(FetaError::Config(format!("split {} is empty", cfg.split)));
    }

    let grid = response_grid();
    let coeff_dim = model_cfg.coeff_dim();
    std::fs::create_dir_all(&out)?;

    let mut header: Vec<String> = vec!["graph".into(), "layer".into(), "head".into()];
    header.extend((0..coeff_dim).map(|k| format!("alpha_{k}")));
    header.extend((0..grid.len()).map(|j| format!("r_{j}")));
    let mut responses = csv::Writer::from_path(out.join("responses.csv"))?;
    responses.write_record(&header)?;

    let mut interp = csv::Writer::from_path(out.join("interpretability.csv"))?;
    interp.write_record(["graph", "layer", "head", "eig_index", "lambda", "node", "component"])?;

    // sums[layer][head][grid point]; per-point sum of squares for variance.
    let lh = model_cfg.layers * model_cfg.heads;
    let mut sum = vec![vec![0.0f64; grid.len()]; lh];
    let mut sum_sq = vec![vec![0.0f64; grid.len()]; lh];

    for sg in graphs {
        let ctx = GraphContext::prepare(&model_cfg, &sg.graph)?;
        let tape = Tape::new();
        let pv = params.vars(&tape);
        let art = crate::model::feta_forward(&tape, &model_cfg, &pv, &ctx)?;
        let eig_grid = scaled_eigs(&ctx.basis);
        for (l, layer_alphas) in art.alphas.iter().enumerate() {
            for (h, alpha_var) in layer_alphas.iter().enumerate() {
                let alpha = alpha_var.value().data.clone();
                let resp = response_for(&model_cfg, &alpha, &grid)?;
                let mut row: Vec<String> =
                    vec![sg.id.to_string(), l.to_string(), h.to_string()];
                row.extend(alpha.iter().map(|v| v.to_string()));
                row.extend(resp.iter().map(|v| v.to_string()));
                responses.write_record(&row)?;
                let slot = l * model_cfg.heads + h;
                for (j, &r) in resp.iter().enumerate() {
                    sum[slot][j] += r;
                    sum_sq[slot][j] += r * r;
                }

                // Interpretability: the eigenvector the head responds to
                // most strongly, exported per node.
                let at_eigs = response_for(&model_cfg, &alpha, &eig_grid)?;
                let mut top = 0usize;
                for (i, &r) in at_eigs.iter().enumerate() {
                    if r.abs() > at_eigs[top].abs() {
                        top = i;
                    }
                }
                let component = ctx.basis.eigvec(top);
                for (node, &c) in component.iter().enumerate() {
                    interp.write_record([
                        sg.id.to_string(),
                        l.to_string(),
                        h.to_string(),
                        top.to_string(),
                        ctx.basis.lambda[top].to_string(),
                        node.to_string(),
                        c.to_string(),
                    ])?;
                }
            }
        }
    }
    responses.flush()?;
    interp.flush()?;

    let count = graphs.len() as f64;
    let mut agg_header: Vec<String> = vec!["layer".into(), "head".into()];
    agg_header.extend((0..grid.len()).map(|j| format!("r_{j}")));
    let mut agg = csv::Writer::from_path(out.join("aggregate.csv"))?;
    agg.write_record(&agg_header)?;
    for l in 0..model_cfg.layers {
        let mut curves = Vec::new();
        for h in 0..model_cfg.heads {
            let slot = l * model_cfg.heads + h;
            let mean: Vec<f64> = sum[slot].iter().map(|s| s / count).collect();
            let mut row: Vec<String> = vec![l.to_string(), h.to_string()];
            row.extend(mean.iter().map(|v| v.to_string()));
            agg.write_record(&row)?;
            let variance: f64 = sum[slot]
                .iter()
                .zip(&sum_sq[slot])
                .map(|(&s, &sq)| (sq / count - (s / count) * (s / count)).max(0.0))
                .sum::<f64>()
                / grid.len() as f64;
            println!("layer {l} head {h}: response variance across graphs = {variance}");
            curves.push((format!("head {h}"), mean));
        }
        let svg = svg_line_plot(
            &format!("mean filter response, layer {l}"),
            &grid,
            &curves,
        );
        std::fs::write(out.join(format!("layer{l}.svg")), svg)?;
    }
    agg.flush()?;
    write_run_config(cfg, &out)?;
    println!("artifacts in {}", out.display());
    Ok(())
}

pub fn cmd_verify_theorems(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir()?.to_path_buf();
    std::fs::create_dir_all(&out)?;
    let mut w = csv::Writer::from_path(out.join("verification.csv"))?;
    w.write_record([
        "instance",
        "family",
        "n",
        "flavor",
        "lower",
        "upper",
        "e_affine",
        "e_star",
        "feasible",
        "constrained_excess",
        "lemma_gradient_mismatch",
        "min_hessian_diag",
        "status",
    ])?;

    let families = ["path", "complete", "cycle", "sbm"];
    let mut violations = Vec::new();
    for i in 0..cfg.instances {
        let mut rng = derive_stream(cfg.seed, i as u64);
        let family = families[i % families.len()];
        let g = instance_graph(family, &mut rng)?;
        let lap = build_laplacian(&g, LaplacianKind::Normalized)?;
        let basis = eigendecompose(&lap)?;
        let scaled = scaled_eigs(&basis);
        let flavor = ["low-pass", "random", "identity"][i % 3];
        let f: Vec<f64> = match flavor {
            "low-pass" => {
                let a = rng.gen_range(0.0..0.3);
                let b = rng.gen_range(0.3..0.7);
                scaled.iter().map(|&x| a + b * (1.0 - x) / 2.0).collect()
            }
            "random" => (0..g.n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            _ => vec![1.0; g.n],
        };
        let target = FilterTarget::new(f, basis)?;

        let mut status = "ok".to_string();
        let mut cells = vec![String::new(); 6];
        match verify_error_bounds(&target, None) {
            Ok(check) => {
                let r = &check.report;
                cells = vec![
                    r.lower.to_string(),
                    r.upper.to_string(),
                    r.e_affine.to_string(),
                    r.e_star.to_string(),
                    r.feasible.to_string(),
                    r.constrained_excess.to_string(),
                ];
            }
            Err(FetaError::Verification(msg)) => {
                status = format!("violated: {msg}");
            }
            Err(other) => return Err(other),
        }

        // Lemma check on a tied-weight attention support.
        let d = g.n;
        let x = Tensor::new(
            vec![g.n, d],
            (0..g.n * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let wt = Tensor::new(vec![d, d], (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let xw = x.matmul(&wt);
        let c_t = xw
            .matmul(&xw.transpose())
            .scale(1.0 / (d as f64).sqrt())
            .softmax_rows();
        let lemma = check_lemma_gradients(&c_t, &target)?;
        if lemma.max_gradient_mismatch > 1e-4 {
            status = format!(
                "violated: lemma gradient mismatch {}",
                lemma.max_gradient_mismatch
            );
        }
        if lemma.min_hessian_diag < -1e-9 {
            status = format!("violated: negative curvature {}", lemma.min_hessian_diag);
        }
        if cfg.break_bound && i == 0 {
            status = "violated: injected bound break (test hook)".to_string();
        }
        if status != "ok" {
            violations.push(format!("instance {i}: {status}"));
        }
        let mut row = vec![
            i.to_string(),
            family.to_string(),
            g.n.to_string(),
            flavor.to_string(),
        ];
        row.extend(cells);
        row.push(lemma.max_gradient_mismatch.to_string());
        row.push(lemma.min_hessian_diag.to_string());
        row.push(status);
        w.write_record(&row)?;
    }
    w.flush()?;
    write_run_config(cfg, &out)?;

    println!(
        "verified {} instances over {} graph families; {} violations",
        cfg.instances,
        families.len(),
        violations.len()
    );
    for v in &violations {
        println!("{v}");
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(FetaError::Verification(format!(
            "{} of {} instances violated a bound",
            violations.len(),
            cfg.instances
        )))
    }
}

fn instance_graph(family: &str, rng: &mut impl Rng) -> Result<Graph> {
    Ok(match family {
        "path" => Graph::path(rng.gen_range(4..=9)),
        "complete" => Graph::complete(rng.gen_range(4..=9)),
        "cycle" => {
            let n = rng.gen_range(4..=9);
            let pairs: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
            Graph::from_pairs(n, &pairs)?
        }
        _ => {
            let npb = rng.gen_range(2..=4);
            let sbm = SBMConfig {
                blocks: 2,
                nodes_per_block: npb,
                p_intra: 0.9,
                p_inter: 0.4,
                eig_indices: vec![1],
                splits: (1, 0, 0),
                seed: 0,
            };
            generate_sbm(&sbm, rng)?
        }
    })
}

// ---------------------------------------------------------------------------
// plotting

const SVG_PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f",
];

/// Hand-rolled polyline plot: fixed 640×400 viewport, x spanning the grid
/// (λ̃ ∈ [−1, 1]), y auto-scaled over all curves.
pub fn svg_line_plot(title: &str, grid: &[f64], curves: &[(String, Vec<f64>)]) -> String {
    let (w, h) = (640.0, 400.0);
    let (ml, mr, mt, mb) = (56.0, 16.0, 30.0, 42.0);
    let (x0, x1) = (grid[0], grid[grid.len() - 1]);
    let mut y0 = f64::INFINITY;
    let mut y1 = f64::NEG_INFINITY;
    for (_, ys) in curves {
        for &y in ys {
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
    }
    if !y0.is_finite() || !y1.is_finite() {
        y0 = 0.0;
        y1 = 1.0;
    }
    if (y1 - y0).abs() < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pad = 0.05 * (y1 - y0);
    y0 -= pad;
    y1 += pad;
    let px = |x: f64| ml + (x - x0) / (x1 - x0) * (w - ml - mr);
    let py = |y: f64| h - mb - (y - y0) / (y1 - y0) * (h - mt - mb);

    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">"
    );
    let _ = writeln!(s, "  <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "  <text x=\"{:.1}\" y=\"18\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">{title}</text>",
        (ml + w - mr) / 2.0
    );
    // axes
    let _ = writeln!(
        s,
        "  <line x1=\"{ml}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>",
        h - mb,
        w - mr,
        h - mb
    );
    let _ = writeln!(
        s,
        "  <line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{:.1}\" stroke=\"black\"/>",
        h - mb
    );
    for i in 0..=4 {
        let x = x0 + (x1 - x0) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            "  <line x1=\"{0:.1}\" y1=\"{1:.1}\" x2=\"{0:.1}\" y2=\"{2:.1}\" stroke=\"black\"/>",
            px(x),
            h - mb,
            h - mb + 5.0
        );
        let _ = writeln!(
            s,
            "  <text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{x:.2}</text>",
            px(x),
            h - mb + 18.0
        );
        let y = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            "  <line x1=\"{1:.1}\" y1=\"{0:.1}\" x2=\"{ml}\" y2=\"{0:.1}\" stroke=\"black\"/>",
            py(y),
            ml - 5.0
        );
        let _ = writeln!(
            s,
            "  <text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{y:.3}</text>",
            ml - 8.0,
            py(y) + 4.0
        );
    }
    let _ = writeln!(
        s,
        "  <text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">scaled frequency</text>",
        (ml + w - mr) / 2.0,
        h - 6.0
    );
    for (ci, (label, ys)) in curves.iter().enumerate() {
        let color = SVG_PALETTE[ci % SVG_PALETTE.len()];
        let points: Vec<String> = grid
            .iter()
            .zip(ys)
            .map(|(&x, &y)| format!("{:.1},{:.1}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            s,
            "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            points.join(" ")
        );
        let ly = mt + 14.0 * ci as f64 + 6.0;
        let _ = writeln!(
            s,
            "  <line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>",
            w - mr - 90.0,
            w - mr - 70.0
        );
        let _ = writeln!(
            s,
            "  <text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\">{label}</text>",
            w - mr - 64.0,
            ly + 4.0
        );
    }
    let _ = writeln!(s, "</svg>");
    s
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_its_own_serialization() {
        let mut cfg = RunConfig::default();
        cfg.heads = 4;
        cfg.order = 8;
        cfg.dataset = Some(PathBuf::from("data/s1"));
        cfg.lr = 5e-4;
        let text = cfg.serialize();
        let reparsed = RunConfig::parse(&text).unwrap();
        // Every key appears in the serialization, so `explicit` fills up.
        assert_eq!(reparsed.heads, 4);
        assert_eq!(reparsed.order, 8);
        assert_eq!(reparsed.dataset, cfg.dataset);
        assert_eq!(reparsed.lr, 5e-4);
        assert_eq!(reparsed.serialize(), text);
    }

    #[test]
    fn unknown_duplicate_and_malformed_keys_are_rejected() {
        assert!(matches!(
            RunConfig::parse("no_such_key = 3"),
            Err(FetaError::Config(_))
        ));
        assert!(matches!(
            RunConfig::parse("heads = 2\nheads = 4"),
            Err(FetaError::Config(_))
        ));
        assert!(matches!(
            RunConfig::parse("heads four"),
            Err(FetaError::Config(_))
        ));
        assert!(matches!(
            RunConfig::parse("heads = four"),
            Err(FetaError::Config(_))
        ));
        let ok = RunConfig::parse("# comment\n\nheads = 2\n").unwrap();
        assert_eq!(ok.heads, 2);
        assert!(ok.explicit.contains("heads"));
        assert!(!ok.explicit.contains("order"));
    }

    #[test]
    fn model_config_derives_widths_and_maps_pe() {
        let mut cfg = RunConfig::default();
        cfg.d = 16;
        let m = cfg.model_config(3).unwrap();
        assert_eq!(m.d_in, 3);
        assert_eq!(m.out_width, 3);
        assert_eq!(m.pe, PeMode::None);

        cfg.pe = "lap-static".into();
        cfg.pe_k = 5;
        let m = cfg.model_config(3).unwrap();
        assert_eq!(m.pe, PeMode::LapStatic { k: 5 });

        cfg.pe = "kernel-diffusion".into();
        cfg.attention = AttentionKind::KernelPe;
        cfg.pe_beta = 0.25;
        let m = cfg.model_config(3).unwrap();
        assert_eq!(m.pe, PeMode::KernelDiffusion { beta: 0.25 });
    }

    #[test]
    fn response_for_matches_direct_recomputation() {
        let cfg = FetaConfig::synthetic_default(2, 16, 1, 3);
        let alpha = vec![0.2, -0.4, 0.9, 0.05];
        let grid = response_grid();
        let via_cli = response_for(&cfg, &alpha, &grid).unwrap();
        let direct = frequency_response(&FilterCoefficients::new(alpha).unwrap(), &grid).unwrap();
        for (a, b) in via_cli.iter().zip(&direct.magnitude) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn svg_plot_contains_polylines_and_labels() {
        let grid = response_grid();
        let ys: Vec<f64> = grid.iter().map(|x| x * x).collect();
        let svg = svg_line_plot("test plot", &grid, &[("head 0".into(), ys)]);
        assert!(svg.contains("<polyline"));
        assert!(svg.contains("test plot"));
        assert!(svg.contains("head 0"));
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(exit_code_for(&FetaError::Verification("x".into())), 1);
        assert_eq!(exit_code_for(&FetaError::NumericalAbort("x".into())), 3);
        assert_eq!(exit_code_for(&FetaError::Config("x".into())), 2);
        assert_eq!(
            exit_code_for(&FetaError::Io(std::io::Error::other("x"))),
            2
        );
    }
}
