//! `mtplab`: seeded, reproducible runs of task generation, gradient and
//! circuit verification, reduced dynamics, training and attention export.
//!
//! Exit codes: 0 when every check passes, 1 when a check fails, 2 on usage
//! or runtime errors.

mod commands;
mod config;
mod heatmap;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub const SEED_ENV: &str = "MTPLAB_SEED";

#[derive(Parser, Debug)]
#[command(name = "mtplab", version, about = "Multi-token prediction circuits on star graphs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate task instances, one serialized line each.
    Gen(GenArgs),
    /// Compare closed-form gradients with central finite differences.
    VerifyGradients(VerifyGradientsArgs),
    /// Sweep the constructed circuit over gamma and check decay and
    /// stationarity.
    VerifyCircuit(VerifyCircuitArgs),
    /// Reduced training dynamics.
    Dynamics(DynamicsArgs),
    /// Train a model on star graphs.
    Train(TrainArgs),
    /// Evaluate a checkpoint on star graphs.
    Eval(EvalArgs),
    /// Export both attention matrices of one instance.
    Heatmap(HeatmapArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Star,
    Tree,
    Countdown,
    Sat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Order {
    /// `end,start` prompt (the model's encoding).
    EndStart,
    /// `start,end` prompt (the published text format).
    StartEnd,
}

impl From<Order> for mtplab::taskgen::PromptOrder {
    fn from(o: Order) -> Self {
        match o {
            Order::EndStart => mtplab::taskgen::PromptOrder::EndStart,
            Order::StartEnd => mtplab::taskgen::PromptOrder::StartEnd,
        }
    }
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long, value_enum)]
    pub task: Task,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "end-start")]
    pub order: Order,
    /// Star: number of paths leaving the start node.
    #[arg(long, default_value_t = 2)]
    pub paths: usize,
    /// Star: nodes per path, start included.
    #[arg(long, default_value_t = 3)]
    pub path_len: usize,
    /// Star: size of the label pool.
    #[arg(long, default_value_t = 10)]
    pub nodes: usize,
    /// Tree: depth below the root.
    #[arg(long, default_value_t = 3)]
    pub depth: usize,
    /// Countdown: number of operands.
    #[arg(long, default_value_t = 4)]
    pub operands: usize,
    #[arg(long, default_value_t = mtplab::taskgen::SAT_VARS)]
    pub vars: usize,
    #[arg(long, default_value_t = mtplab::taskgen::SAT_CLAUSES)]
    pub clauses: usize,
}

#[derive(Args, Debug)]
pub struct VerifyGradientsArgs {
    #[arg(long, default_value_t = 200)]
    pub trials: usize,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
    /// Maximum relative error per matrix.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Weights are drawn from uniform(-scale, scale).
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    #[arg(long, default_value_t = mtplab::numerics::DEFAULT_FD_EPSILON)]
    pub eps: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CircuitLoss {
    /// The full composite loss, autoregressive term included.
    Total,
    /// The composite loss without the autoregressive term.
    Core,
}

#[derive(Args, Debug)]
pub struct VerifyCircuitArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [5.0, 10.0, 15.0, 20.0, 25.0])]
    pub gammas: Vec<f64>,
    /// Gamma at which stationarity is checked.
    #[arg(long, default_value_t = 30.0)]
    pub stationary_gamma: f64,
    #[arg(long, default_value_t = 100)]
    pub instances: usize,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "total")]
    pub loss: CircuitLoss,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DynamicsArgs {
    #[command(subcommand)]
    pub which: Dynamics,
}

#[derive(Subcommand, Debug)]
pub enum Dynamics {
    /// Euler integration of the offset-weight flow from zero.
    Phase1 {
        #[arg(long, default_value_t = 0.1)]
        step: f64,
        #[arg(long, default_value_t = 20_000)]
        steps: usize,
        #[arg(long, default_value_t = 10)]
        seq_len: usize,
        /// Random states at which the gap must grow.
        #[arg(long, default_value_t = 10_000)]
        probes: usize,
        #[arg(long, env = SEED_ENV, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Layer-2 descent with layer 1 frozen at a sharp pointer.
    Phase2 {
        #[arg(long, default_value_t = 1000.0)]
        gamma: f64,
        #[arg(long, default_value_t = 64)]
        graphs: usize,
        #[arg(long, default_value_t = 1.0)]
        step: f64,
        #[arg(long, default_value_t = 20_000)]
        steps: usize,
        #[arg(long, env = SEED_ENV, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Expected next-token gradient on the offset weights at zero init.
    NtpField {
        #[arg(long, default_value_t = 10)]
        seq_len: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// `key = value` file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training graphs, one line each. Generated from the seed when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Held-out graphs. Without it the tail of `--data` is held out.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_enum)]
    pub order: Option<Order>,
    #[arg(long)]
    pub objective: Option<String>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, env = SEED_ENV)]
    pub seed: Option<u64>,
    /// `zero` or `uniform:<a>`.
    #[arg(long)]
    pub init: Option<String>,
    #[arg(long)]
    pub pin_content1: Option<bool>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub gamma_phase1: Option<f64>,
    #[arg(long)]
    pub epochs_phase1: Option<usize>,
    #[arg(long)]
    pub toeplitz_phase1: Option<bool>,
    /// Generated training graphs when `--data` is absent.
    #[arg(long)]
    pub train_count: Option<usize>,
    /// Generated held-out graphs when `--data` is absent.
    #[arg(long)]
    pub eval_count: Option<usize>,
    /// Share of `--data` held out when `--eval-data` is absent.
    #[arg(long)]
    pub eval_fraction: Option<f64>,
    #[arg(long)]
    pub nodes: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "end-start")]
    pub order: Order,
    /// JSON report path.
    #[arg(long)]
    pub out: PathBuf,
    /// Fail (exit 1) below this first-step accuracy.
    #[arg(long)]
    pub min_v_accuracy: Option<f64>,
}

#[derive(Args, Debug)]
pub struct HeatmapArgs {
    #[arg(long, conflicts_with = "circuit")]
    pub checkpoint: Option<PathBuf>,
    /// Use the constructed circuit at this gamma instead of a checkpoint.
    #[arg(long)]
    pub circuit: Option<f64>,
    /// One serialized star graph.
    #[arg(long)]
    pub instance: String,
    #[arg(long, value_enum, default_value = "end-start")]
    pub order: Order,
    /// Label pool size when no checkpoint fixes it.
    #[arg(long, default_value_t = 10)]
    pub nodes: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Also write shaded SVG grids.
    #[arg(long)]
    pub svg: bool,
}

/// Result of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    Fail,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::Fail) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
