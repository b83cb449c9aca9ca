use clap::{Parser, Subcommand, ValueEnum};
use ssm_cli::{
    cmd_eval, cmd_generate, cmd_inspect, cmd_rollout, cmd_train, thread_count, CliError, EvalArgs,
    ExperimentConfig,
};
use ssm_core::eval::BceConvention;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Multiple-shooting state-space models: generate data, train, evaluate.
#[derive(Parser)]
#[command(name = "ssm", version)]
struct Cli {
    /// Worker threads (default: all cores). SSM_THREADS takes precedence.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BceArg {
    PerPixel,
    FrameSum,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the configured system and write an SSMT dataset.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trajectories: Option<usize>,
        #[arg(long)]
        horizon: Option<usize>,
        /// Overrides `data_seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; writes checkpoint, history and resolved config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Training data (default: the config's dataset, else generated).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Filter the start of each test sequence and score the forecast.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        testset: PathBuf,
        #[arg(long)]
        filter_len: Option<usize>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long, value_enum)]
        bce_convention: Option<BceArg>,
        /// Output prefix for the .csv and .json reports.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Iterate the transition model from a shooting node.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Trajectory index of the node.
        #[arg(long)]
        node: usize,
        #[arg(long, default_value_t = 0)]
        segment: usize,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump the header of a dataset or checkpoint.
    Inspect { file: PathBuf },
}

fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    ExperimentConfig::load(path)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = thread_count(cli.threads)? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let mut log = std::io::stdout().lock();
    match cli.command {
        Command::Generate {
            config,
            out,
            trajectories,
            horizon,
            seed,
        } => {
            let mut c = load_config(&config)?;
            if let Some(n) = trajectories {
                c.trajectories = n;
            }
            if let Some(t) = horizon {
                c.horizon = Some(t);
                // Keep the config valid for sequence lengths it was not written for.
                if c.segment_len.is_some_and(|n| t % n != 0) {
                    c.segment_len = None;
                }
            }
            if let Some(s) = seed {
                c.data_seed = s;
            }
            cmd_generate(&c, &out, &mut log)?;
        }
        Command::Train {
            config,
            data,
            out_dir,
        } => {
            let mut c = load_config(&config)?;
            if let Some(d) = out_dir {
                c.out_dir = d;
            }
            cmd_train(&c, data.as_deref(), &mut log)?;
        }
        Command::Eval {
            config,
            checkpoint,
            testset,
            filter_len,
            horizon,
            bce_convention,
            out,
        } => {
            let c = config.as_deref().map(load_config).transpose()?;
            let args = EvalArgs {
                filter_len,
                horizon,
                bce_convention: bce_convention.map(|b| match b {
                    BceArg::PerPixel => BceConvention::PerPixel,
                    BceArg::FrameSum => BceConvention::FrameSum,
                }),
                out_prefix: out,
            };
            cmd_eval(c.as_ref(), &checkpoint, &testset, &args, &mut log)?;
        }
        Command::Rollout {
            checkpoint,
            node,
            segment,
            steps,
            out,
        } => {
            cmd_rollout(&checkpoint, node, segment, steps, out.as_deref(), &mut log)?;
        }
        Command::Inspect { file } => cmd_inspect(&file, &mut log)?,
    }
    let _ = log.flush();
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
