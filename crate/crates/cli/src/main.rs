//! `rmmdp` command-line tool.
//!
//! Exit codes: 0 success, 1 error (JSON on stderr), 2 exploration budget
//! exhausted, 3 fit infeasible after the retry.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "rmmdp", version, about = "Reward-mixing MDP toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Args, Clone, Debug)]
pub struct Global {
    /// Master seed; every random stream is derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Subcommand)]
pub enum Command {
    /// Check the simplex invariants of a model file.
    Validate {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Sample episodes and log them as JSON lines.
    Simulate(SimulateArgs),
    /// Optimistic exploration of reward moments.
    Explore(ExploreArgs),
    /// Fit a latent mixture to a moments file.
    Fit(FitArgs),
    /// Exact optimal policy of a known model.
    Plan {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Exact analysis tools.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Build a parity-chain hard instance.
    Hardgen(HardgenArgs),
    /// Explore, fit, plan and evaluate in one go.
    Em2(Em2Args),
}

#[derive(Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub episodes: u64,
    #[arg(long, value_enum, default_value_t = PolicyKind::Uniform)]
    pub policy: PolicyKind,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PolicyKind {
    Uniform,
    Optimal,
}

#[derive(Args, Clone, Default)]
pub struct ExploreFlags {
    /// Moment degree (default min(2M-1, H) for em2, 2 otherwise).
    #[arg(long)]
    pub degree: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    /// Episode budget K_max.
    #[arg(long)]
    pub max_episodes: Option<u64>,
    #[arg(long)]
    pub batch: Option<u64>,
}

#[derive(Args)]
pub struct ExploreArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub flags: ExploreFlags,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeKind {
    General,
    BalancedTwo,
    Grid,
}

#[derive(Args, Clone, Default)]
pub struct FitFlags {
    /// Number of latent contexts to fit.
    #[arg(long)]
    pub contexts: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeKind>,
    /// Grid resolution for `--mode grid`.
    #[arg(long, default_value_t = 10)]
    pub grid_p: u32,
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub slack_scale: Option<f64>,
}

#[derive(Args)]
pub struct FitArgs {
    #[arg(long)]
    pub moments: PathBuf,
    #[command(flatten)]
    pub flags: FitFlags,
}

#[derive(Subcommand)]
pub enum AnalyzeCommand {
    /// Eventwise TV against the moment-mismatch bound.
    Tv {
        #[arg(long)]
        model1: PathBuf,
        #[arg(long)]
        model2: PathBuf,
        #[arg(long)]
        degree: Option<usize>,
        /// Adds the level-set events built from this moments file.
        #[arg(long)]
        moments: Option<PathBuf>,
    },
    /// Both sides of the KL information identity.
    Kl {
        #[arg(long)]
        model1: PathBuf,
        #[arg(long)]
        model2: PathBuf,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        #[arg(long, value_enum, default_value_t = StrategyKind::Uniform)]
        strategy: StrategyKind,
        /// Hide each episode's own rewards from the strategy.
        #[arg(long)]
        reward_blind: bool,
    },
    /// Level thresholds of a moments file, with sup-probabilities when the
    /// dynamics are given.
    Levels {
        #[arg(long)]
        moments: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum StrategyKind {
    Uniform,
    Hashed,
    Adaptive,
}

#[derive(Args)]
pub struct HardgenArgs {
    #[arg(long, default_value_t = 2)]
    pub contexts: usize,
    #[arg(long, default_value_t = 2)]
    pub degree: usize,
    /// Target top-degree deviation; the largest reachable one when absent.
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long, default_value_t = 2)]
    pub actions: usize,
    /// Comma-separated correct actions, one per step.
    #[arg(long, value_delimiter = ',')]
    pub correct: Option<Vec<usize>>,
    #[arg(long)]
    pub symmetric: bool,
}

#[derive(Args)]
pub struct Em2Args {
    /// True model, used as a black-box simulator and for the final evaluation.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub explore: ExploreFlags,
    #[command(flatten)]
    pub fit: FitFlags,
    #[arg(long)]
    pub eval_episodes: Option<u64>,
    /// Record wall time in metrics.csv (breaks byte-identical reruns).
    #[arg(long)]
    pub wall_clock: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            let chain: Vec<String> = e.chain().map(ToString::to_string).collect();
            let msg = serde_json::json!({
                "error": chain.join(": "),
                "exit_code": 1,
            });
            eprintln!("{msg}");
            ExitCode::from(1)
        }
    }
}
