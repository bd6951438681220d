use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use feta::cli::{
    cmd_analyze_filters, cmd_eval, cmd_generate_data, cmd_train, cmd_verify_theorems,
    exit_code_for, RunConfig,
};
use feta::Result;

#[derive(Parser)]
#[command(
    name = "feta",
    about = "Graph transformer with attention-driven spectral filters: data generation, training, filter analysis, and theorem verification"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Echo the resolved configuration and exit without running.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset preset to disk.
    GenerateData(Common),
    /// Train a model and write checkpoint + metrics.
    Train(Common),
    /// Evaluate a checkpoint on a dataset split.
    Eval(Common),
    /// Export frequency-response and interpretability artifacts from a checkpoint.
    AnalyzeFilters(Common),
    /// Run the filtering-error verification battery.
    VerifyTheorems {
        #[command(flatten)]
        common: Common,
        /// Exact number of verification instances (overrides the config file).
        #[arg(long)]
        instances: Option<usize>,
    },
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::GenerateData(_) => "generate-data",
            Cmd::Train(_) => "train",
            Cmd::Eval(_) => "eval",
            Cmd::AnalyzeFilters(_) => "analyze-filters",
            Cmd::VerifyTheorems { .. } => "verify-theorems",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Cmd::GenerateData(c)
            | Cmd::Train(c)
            | Cmd::Eval(c)
            | Cmd::AnalyzeFilters(c) => c,
            Cmd::VerifyTheorems { common, .. } => common,
        }
    }
}

fn resolve_config(cmd: &Cmd) -> Result<RunConfig> {
    let common = cmd.common();
    let mut cfg = match &common.config {
        Some(path) => RunConfig::parse(&std::fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.explicit.insert("seed".into());
    }
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
        cfg.explicit.insert("out".into());
    }
    if let Cmd::VerifyTheorems { instances: Some(n), .. } = cmd {
        cfg.instances = *n;
        cfg.explicit.insert("instances".into());
    }
    Ok(cfg)
}

fn run(cmd: &Cmd) -> Result<()> {
    let cfg = resolve_config(cmd)?;
    if cmd.common().dry_run {
        println!("command = {}", cmd.name());
        print!("{}", cfg.serialize());
        return Ok(());
    }
    match cmd {
        Cmd::GenerateData(_) => cmd_generate_data(&cfg),
        Cmd::Train(_) => cmd_train(&cfg),
        Cmd::Eval(_) => cmd_eval(&cfg),
        Cmd::AnalyzeFilters(_) => cmd_analyze_filters(&cfg),
        Cmd::VerifyTheorems { .. } => cmd_verify_theorems(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
