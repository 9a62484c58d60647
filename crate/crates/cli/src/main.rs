mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "teamwork", version, about = "Coordinated low-rank adapters for teams of denoisers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Root directory for every artifact of the run.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Extra key=value config file, applied over `<out>/run.cfg`.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Single config override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset under `<out>/data`.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the single-plane base denoiser.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train adapters on top of the base denoiser.
    Train {
        #[command(flatten)]
        common: Common,
        /// teamwork, per-instance or frozen.
        #[arg(long)]
        mode: Option<String>,
        /// Output-teammate drop probability; enables dropout masks when positive.
        #[arg(long)]
        dropout: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        accumulation: Option<usize>,
    },
    /// Sample held-out examples and report errors.
    Eval {
        #[command(flatten)]
        common: Common,
        /// all, each, only:<name|index> or subset:<a,b,...>.
        #[arg(long, default_value = "all")]
        mask: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write sampled planes for one held-out example.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "all")]
        mask: String,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Measure MACs across team sizes and fit growth rates.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Cost scheme; repeatable. Defaults to teamwork, self-attention and joint-attention.
        #[arg(long = "scheme")]
        schemes: Vec<String>,
        /// Team sizes, comma separated.
        #[arg(long = "T", value_delimiter = ',', default_values_t = [1usize, 2, 4, 8, 16])]
        team_sizes: Vec<usize>,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 16)]
        rank: usize,
        #[arg(long, default_value_t = 64)]
        tokens: usize,
        #[arg(long, default_value_t = 1)]
        heads: usize,
    },
}

/// Defaults, then `<out>/run.cfg`, then `--config`, then `--set`, then
/// `--seed`. Command-specific flags are applied by the caller.
fn load_config(common: &Common) -> CliResult<RunConfig> {
    let mut config = RunConfig::default();
    let saved = common.out.join(config::CONFIG_FILE);
    if saved.is_file() {
        config.load_into(&saved)?;
    }
    if let Some(path) = &common.config {
        config.load_into(path)?;
    }
    for o in &common.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("--set expects KEY=VALUE, got {o:?}")))?;
        config.set(k, v)?;
    }
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData { common, task, count } => {
            let mut config = load_config(&common)?;
            if let Some(t) = task {
                config.set("task", &t)?;
            }
            if let Some(c) = count {
                config.count = c;
            }
            commands::gen_data(&common.out, &config)
        }
        Command::Pretrain { common, steps } => {
            let mut config = load_config(&common)?;
            if let Some(s) = steps {
                config.pretrain_steps = s;
            }
            commands::pretrain(&common.out, &config)
        }
        Command::Train {
            common,
            mode,
            dropout,
            steps,
            rank,
            accumulation,
        } => {
            let mut config = load_config(&common)?;
            if let Some(m) = mode {
                config.set("mode", &m)?;
            }
            if let Some(p) = dropout {
                config.dropout_prob = p;
                config.set("mask_policy", if p > 0.0 { "dropout" } else { "full" })?;
            }
            if let Some(s) = steps {
                config.steps = s;
            }
            if let Some(r) = rank {
                config.rank = r;
            }
            if let Some(a) = accumulation {
                config.accumulation = a;
            }
            commands::train(&common.out, &config)
        }
        Command::Eval { common, mask, checkpoint } => {
            let mut config = load_config(&common)?;
            if let Some(c) = checkpoint {
                config.checkpoint = c;
            }
            commands::eval(&common.out, &config, &mask)
        }
        Command::Sample {
            common,
            mask,
            index,
            checkpoint,
        } => {
            let mut config = load_config(&common)?;
            if let Some(c) = checkpoint {
                config.checkpoint = c;
            }
            commands::sample(&common.out, &config, &mask, index)
        }
        Command::Bench {
            common,
            schemes,
            team_sizes,
            dim,
            rank,
            tokens,
            heads,
        } => {
            let config = load_config(&common)?;
            let bench = commands::BenchArgs {
                schemes,
                team_sizes,
                dim,
                rank,
                tokens,
                heads,
            };
            commands::bench(&common.out, &config, &bench)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("bad arguments").trim_start_matches("error: ");
            eprintln!("{}", CliError::config(first));
            return ExitCode::from(2);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.kind.exit_code() as u8)
        }
    }
}
