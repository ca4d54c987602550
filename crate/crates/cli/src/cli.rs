use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hrl_core::data::FileFormat;
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "hrl", version, about = "Clustered policy evaluation and iteration for heterogeneous offline RL")]
pub struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, env = "HRL_THREADS")]
    pub threads: Option<usize>,

    /// TOML settings file for the chosen command. Flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit, cluster and infer group values of a target policy.
    Evaluate(EvaluateArgs),
    /// Learn one softmax policy per detected group.
    Iterate(IterateArgs),
    /// Write a simulated two-group batch and its membership sidecar.
    Simulate(SimulateArgs),
    /// Confidence-interval coverage over an (n, T) grid.
    Coverage(CoverageArgs),
    /// Monte-Carlo values of clustered and pooled learned policies.
    PolicyValue(PolicyValueArgs),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    #[default]
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DataFormat {
    Csv,
    Jsonl,
}

impl From<DataFormat> for FileFormat {
    fn from(f: DataFormat) -> Self {
        match f {
            DataFormat::Csv => FileFormat::Csv,
            DataFormat::Jsonl => FileFormat::Jsonl,
        }
    }
}

/// Where results go. Not part of the embedded settings.
#[derive(Debug, Args)]
pub struct OutputArgs {
    /// Result file; stdout when absent.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,

    #[arg(long, value_enum)]
    pub format: Option<TableFormat>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Trajectory file (CSV or JSONL).
    #[arg(long, value_name = "FILE")]
    pub data: Option<PathBuf>,

    /// Defaults to the file extension.
    #[arg(long, value_enum)]
    pub data_format: Option<DataFormat>,

    #[arg(long)]
    pub gamma: Option<f64>,

    /// Smallest action code in the file.
    #[arg(long)]
    pub action_base: Option<usize>,

    #[arg(long)]
    pub n_actions: Option<usize>,

    /// CSV of states over which values are integrated; initial states by default.
    #[arg(long, value_name = "FILE")]
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// `identity`, `identity:intercept=false` or `bspline:degree=3:knots=5`.
    #[arg(long)]
    pub basis: Option<String>,

    /// `mcp:lambda=0.1:eta=1.5` or `scad:lambda=0.1:eta=3.7`.
    #[arg(long)]
    pub penalty: Option<String>,

    /// `fused`, `fused:tau=0.05` or `kmeans:k=2`.
    #[arg(long)]
    pub grouping: Option<String>,

    /// `refit` or `average`.
    #[arg(long)]
    pub theta_mode: Option<String>,

    #[arg(long)]
    pub rho: Option<f64>,

    /// Primal residual tolerance.
    #[arg(long)]
    pub eps: Option<f64>,

    /// ADMM iteration cap.
    #[arg(long)]
    pub max_iters: Option<usize>,

    /// Relative ridge of the per-trajectory start.
    #[arg(long)]
    pub ridge: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,

    /// Target policy as JSON.
    #[arg(long, value_name = "FILE")]
    pub policy: Option<PathBuf>,

    /// Confidence level of the intervals.
    #[arg(long)]
    pub level: Option<f64>,

    #[command(flatten)]
    pub model: ModelArgs,

    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct IterateArgs {
    #[command(flatten)]
    pub data: DataArgs,

    #[arg(long)]
    pub max_outer: Option<usize>,

    /// Keep exactly this many groups; 1 gives the pooled baseline.
    #[arg(long)]
    pub force_k: Option<usize>,

    #[arg(long)]
    pub tol_v: Option<f64>,

    /// Fit policies without an intercept.
    #[arg(long)]
    pub no_intercept: bool,

    #[command(flatten)]
    pub model: ModelArgs,

    /// Per-iteration JSONL trace, flushed line by line.
    #[arg(long, value_name = "FILE")]
    pub trace: Option<PathBuf>,

    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub n_per_group: Option<usize>,

    /// Transitions per trajectory.
    #[arg(long = "t")]
    pub horizon: Option<usize>,

    #[arg(long)]
    pub seed: Option<u64>,

    #[arg(long)]
    pub gamma: Option<f64>,

    /// Batch file to write.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,

    /// Membership sidecar; `<out stem>.membership.csv` by default.
    #[arg(long, value_name = "FILE")]
    pub membership: Option<PathBuf>,

    #[arg(long, value_enum)]
    pub data_format: Option<DataFormat>,
}

#[derive(Debug, Args)]
pub struct CoverageArgs {
    /// Grid axes, e.g. `--grid n=20,50,100 t=10,30,40`.
    #[arg(long, num_args = 1..)]
    pub grid: Option<Vec<String>>,

    #[arg(long)]
    pub reps: Option<usize>,

    #[arg(long)]
    pub seed: Option<u64>,

    #[arg(long)]
    pub level: Option<f64>,

    #[arg(long)]
    pub truth_rollouts: Option<usize>,

    #[arg(long)]
    pub reference_size: Option<usize>,

    /// Target policy as JSON; the simulator's target rule by default.
    #[arg(long, value_name = "FILE")]
    pub policy: Option<PathBuf>,

    #[command(flatten)]
    pub model: ModelArgs,

    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct PolicyValueArgs {
    /// Evaluation rollouts per group and repetition.
    #[arg(long)]
    pub rollouts: Option<usize>,

    /// Evaluation horizon.
    #[arg(long = "t")]
    pub horizon: Option<usize>,

    #[arg(long)]
    pub repetitions: Option<usize>,

    #[arg(long)]
    pub seed: Option<u64>,

    /// Training trajectories per group.
    #[arg(long)]
    pub n_per_group: Option<usize>,

    /// Training trajectory length.
    #[arg(long)]
    pub data_t: Option<usize>,

    #[arg(long)]
    pub max_outer: Option<usize>,

    #[command(flatten)]
    pub model: ModelArgs,

    #[command(flatten)]
    pub output: OutputArgs,
}
