//! `lwi` command-line front end: experiment runs, checkpoint fusion,
//! evaluation and activation probes.

pub mod commands;
pub mod config;
mod error;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use lwi_core::align::{FusionConfig, FusionWeight, HeadFusion, KSchedule, LayerPolicy, Metric};
use lwi_core::matching::{MatchConfig, PlanMode};
use serde::de::DeserializeOwned;

pub use error::{CliError, CliResult, EXIT_RUNTIME, EXIT_USAGE};

#[derive(Parser, Debug)]
#[command(name = "lwi", version, about = "Layer-wise model fusion for continual learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run a continual-learning experiment from a TOML or JSON config.
    Run {
        config: PathBuf,
        /// Output directory, overriding `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Align and fuse two checkpoints.
    Fuse(FuseArgs),
    /// Evaluate a checkpoint on the test splits of a data config.
    Eval {
        checkpoint: PathBuf,
        data_config: PathBuf,
        #[arg(long)]
        task_aware: bool,
        #[arg(long)]
        task_agnostic: bool,
        /// Evaluate only the first N tasks of the stream.
        #[arg(long)]
        tasks: Option<usize>,
        /// CSV output path [default: eval.csv next to the checkpoint].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-channel activation levels and pairwise top-k pathway overlap.
    Activations {
        checkpoint: PathBuf,
        data_config: PathBuf,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
        #[arg(long)]
        tasks: Option<usize>,
        /// Output directory [default: the checkpoint's directory].
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
pub struct FuseArgs {
    pub old: PathBuf,
    pub new: PathBuf,
    /// Weight of the old model: a number in [0, 1] or "equal_weight".
    #[arg(long, default_value = "equal_weight", value_parser = parse_k)]
    pub k: FusionWeight,
    /// Final feature layers matched on negated similarity.
    #[arg(long, default_value_t = 1)]
    pub n_deep: usize,
    /// Channel similarity: "euclidean" or "cosine".
    #[arg(long, default_value = "euclidean", value_parser = parse_enum::<Metric>)]
    pub metric: Metric,
    /// "soft" transport plans or "hard" permutations.
    #[arg(long, default_value = "soft", value_parser = parse_enum::<PlanMode>)]
    pub mode: PlanMode,
    /// Old-task heads: "fuse" or "carry".
    #[arg(long, default_value = "fuse", value_parser = parse_enum::<HeadFusion>)]
    pub heads: HeadFusion,
    /// Matching temperature; at or below --tau-min the exact solver is used.
    #[arg(long, default_value_t = MatchConfig::default().tau)]
    pub tau: f64,
    #[arg(long, default_value_t = MatchConfig::default().tau_min)]
    pub tau_min: f64,
    /// Path of the fused checkpoint.
    #[arg(long)]
    pub out: PathBuf,
}

impl FuseArgs {
    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            k: self.k,
            policy: LayerPolicy {
                n_deep: self.n_deep,
                metric: self.metric,
                mode: self.mode,
            },
            match_cfg: MatchConfig {
                tau: self.tau,
                tau_min: self.tau_min,
                ..MatchConfig::default()
            },
            heads: self.heads,
        }
    }
}

fn parse_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned())).map_err(|e| e.to_string())
}

fn parse_k(s: &str) -> Result<FusionWeight, String> {
    if s == "equal_weight" {
        return Ok(FusionWeight::Schedule(KSchedule::EqualWeight));
    }
    s.parse::<f64>()
        .map(FusionWeight::Fixed)
        .map_err(|_| format!("expected a number or \"equal_weight\", got {s:?}"))
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().map_or_else(|| PathBuf::from(name), |p| p.join(name))
}

pub fn execute(command: Command) -> CliResult<()> {
    match command {
        Command::Run { config, out } => commands::cmd_run(&config, out.as_deref()).map(drop),
        Command::Fuse(args) => commands::cmd_fuse(&args.old, &args.new, &args.fusion_config(), &args.out).map(drop),
        Command::Eval {
            checkpoint,
            data_config,
            task_aware,
            task_agnostic,
            tasks,
            out,
        } => {
            let out = out.unwrap_or_else(|| sibling(&checkpoint, "eval.csv"));
            commands::cmd_eval(&checkpoint, &data_config, task_aware, task_agnostic, tasks, &out).map(drop)
        }
        Command::Activations {
            checkpoint,
            data_config,
            top_k,
            tasks,
            out_dir,
        } => {
            let out_dir = out_dir.unwrap_or_else(|| sibling(&checkpoint, ""));
            commands::cmd_activations(&checkpoint, &data_config, top_k, tasks, &out_dir)
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code: 0 on success, 1 on runtime failure, 2 on usage or
/// validation errors.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
