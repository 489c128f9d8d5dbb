use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

mod commands;
mod io;

#[derive(Parser)]
#[command(name = "jlct", version, about = "Joint latent class trees for longitudinal and survival data")]
struct Cli {
    /// Worker threads (0 = all cores). Results do not depend on this.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset plus a ground-truth sidecar.
    Simulate(SimulateArgs),
    /// Grow, prune and fit a model.
    Fit(FitArgs),
    /// Per-record outcome predictions and survival curves.
    Predict(PredictArgs),
    /// Metric report for a model or for a file of predicted curves.
    Evaluate(EvaluateArgs),
    /// Subject-level k-fold cross-validation.
    Crossval(CrossvalArgs),
    /// Terminal-node counts over the simulation grid.
    #[command(name = "replicate-table4")]
    ReplicateTable4(ReplicateArgs),
}

#[derive(Args)]
pub struct SimulateArgs {
    #[arg(long, default_value = "tree")]
    pub structure: String,
    #[arg(long, default_value_t = 1.0)]
    pub p0: f64,
    #[arg(long, default_value = "weibull-i")]
    pub hazard: String,
    #[arg(long, default_value = "light")]
    pub censoring: String,
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Covariates fixed over time.
    #[arg(long)]
    pub time_invariant: bool,
    #[arg(long)]
    pub sigma_v: Option<f64>,
    #[arg(long)]
    pub sigma_e: Option<f64>,
    /// Output CSV; the truth sidecar and a roles file are written next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the true survival curves on a time grid.
    #[arg(long)]
    pub emit_curves: bool,
}

/// Options shared by every command that fits a model.
#[derive(Args, Clone)]
pub struct ModelArgs {
    #[arg(long, default_value = "jlct4")]
    pub variant: String,
    /// Stop splitting below this node statistic (2.71, 3.84, 6.63 or any value).
    #[arg(long, default_value_t = 3.84)]
    pub stop: f64,
    #[arg(long, default_value_t = 6)]
    pub max_leaves: usize,
    /// Defaults to the number of survival variables plus one.
    #[arg(long)]
    pub min_events: Option<usize>,
    #[arg(long, default_value_t = 1e5)]
    pub variance_bound: f64,
    #[arg(long, default_value_t = 20)]
    pub min_node_rows: usize,
    /// One baseline hazard shared by all leaves.
    #[arg(long)]
    pub shared_baseline: bool,
}

#[derive(Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub roles: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Model document to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub roles: PathBuf,
    /// Curves run to this time; defaults to the largest observed time.
    #[arg(long)]
    pub horizon: Option<f64>,
    /// The subjects were used for fitting, so their random effects apply.
    #[arg(long)]
    pub in_sample: bool,
    /// Per-record predictions (CSV).
    #[arg(long)]
    pub out: PathBuf,
    /// Predicted survival curves (CSV).
    #[arg(long)]
    pub emit_curves: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub roles: PathBuf,
    /// Fitted model to evaluate.
    #[arg(long, conflicts_with = "curves", required_unless_present = "curves")]
    pub model: Option<PathBuf>,
    /// Predicted survival curves (CSV with ID, t, S) to evaluate instead of a model.
    #[arg(long)]
    pub curves: Option<PathBuf>,
    /// Ground-truth sidecar from `simulate`.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// True curves as a CSV in the same layout as `--curves`.
    #[arg(long, conflicts_with = "truth")]
    pub true_curves: Option<PathBuf>,
    #[arg(long)]
    pub in_sample: bool,
    /// Leave censored subjects out of the Brier score once their status is unknown.
    #[arg(long)]
    pub brier_exclude_censored: bool,
    /// Report file (key = value); printed to stdout either way.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct CrossvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub roles: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Include wall-clock runtimes (makes the output run-dependent).
    #[arg(long)]
    pub timings: bool,
    #[arg(long)]
    pub brier_exclude_censored: bool,
    /// Per-fold and mean rows (CSV); printed to stdout either way.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ReplicateArgs {
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "tree,linear,nonlinear,asymmetric,null")]
    pub structures: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.7,0.85,1")]
    pub p0: Vec<f64>,
    #[arg(long, default_value = "weibull-i")]
    pub hazard: String,
    #[arg(long, default_value = "light")]
    pub censoring: String,
    #[arg(long)]
    pub time_invariant: bool,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Include wall-clock runtimes (makes the output run-dependent).
    #[arg(long)]
    pub timings: bool,
    /// Per-replicate rows (CSV).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global()?;
    }
    match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Fit(a) => commands::fit(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Crossval(a) => commands::crossval(&a),
        Command::ReplicateTable4(a) => commands::replicate(&a),
    }
}
