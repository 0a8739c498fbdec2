use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use moe_sim::cli::{self, CliError, RunTaskArgs};
use moe_sim::config::GlobalConfig;
use moe_sim::control::{Approach, FeedbackMode, TaskKind};
use moe_sim::estimator::Variant;
use moe_sim::scene::Wig;

/// Simulated soft end-effector for hair care: grasp comparison, force
/// estimation datasets and training, and force-feedback skills.
#[derive(Parser)]
#[command(name = "moe-sim", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON config; omitted sections and fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for sampling, splitting, training and task noise.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override one config leaf, e.g. `--set scene.head.h_hair=0.03`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Press the rigid and soft grippers into the head and close them.
    GraspCompare {
        /// Press depths past first contact, millimetres.
        #[arg(long, value_delimiter = ',', default_value = "2,4,6")]
        depths: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Collect a labelled dataset on one wig.
    Collect {
        #[arg(long)]
        wig: Wig,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one estimator variant on a dataset's training episodes.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "fused")]
        variant: Variant,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss CSV.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Held-out RMSE of checkpoints, or the full wig by variant table.
    Eval {
        /// Datasets, paired in order with --checkpoint.
        #[arg(long)]
        data: Vec<PathBuf>,
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        /// Collect, train and score all three variants on all three wigs.
        #[arg(long, conflicts_with_all = ["data", "checkpoint"])]
        full: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a pat, comb or grasp skill and record its force trace.
    RunTask {
        #[arg(long)]
        task: TaskKind,
        #[arg(long, default_value = "top")]
        approach: Approach,
        #[arg(long, default_value = "force-feedback")]
        mode: FeedbackMode,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        wig: Option<Wig>,
        /// Hand trajectory CSV for comb; synthesized when omitted.
        #[arg(long)]
        demo: Option<PathBuf>,
        /// Trace CSV.
        #[arg(long)]
        out: PathBuf,
        /// Metrics JSON; defaults to the trace path with a .json extension.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = GlobalConfig::load(cli.global.config.as_deref(), &cli.global.overrides)?;
    if let Some(seed) = cli.global.seed {
        config.sampler.seed = seed;
        config.train.seed = seed;
    }
    match cli.command {
        Command::GraspCompare { depths, out } => cli::cmd_grasp_compare(&config, &depths, &out),
        Command::Collect { wig, out } => cli::cmd_collect(&config, wig, &out),
        Command::Train { data, variant, out, history } => {
            cli::cmd_train(&config, &data, variant, &out, history.as_deref())
        }
        Command::Eval { data, checkpoint, full, out } => {
            if full {
                cli::cmd_eval_full(&config, &out)
            } else if data.len() != checkpoint.len() {
                Err(CliError::Usage("--data and --checkpoint must be given the same number of times".into()))
            } else {
                cli::cmd_eval(&config, &data.into_iter().zip(checkpoint).collect::<Vec<_>>(), &out)
            }
        }
        Command::RunTask { task, approach, mode, checkpoint, wig, demo, out, metrics } => {
            let metrics = metrics.unwrap_or_else(|| out.with_extension("json"));
            if metrics == out {
                return Err(CliError::Usage("--metrics must differ from --out".into()));
            }
            let args = RunTaskArgs {
                task,
                approach,
                mode,
                checkpoint: checkpoint.as_deref(),
                wig,
                demo: demo.as_deref(),
                seed: cli.global.seed.unwrap_or(0),
                out: &out,
                metrics: &metrics,
            };
            cli::cmd_run_task(&config, &args)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
