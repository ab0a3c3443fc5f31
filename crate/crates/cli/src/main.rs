use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use regrid_uq::commands::{cmd_analyze, cmd_eval, cmd_fit, cmd_report, cmd_synth};
use regrid_uq::pipeline::AnalysisMode;
use regrid_uq::{Error, Result};

/// Kriging regridding with regridding-uncertainty propagation.
#[derive(Parser, Debug)]
#[command(name = "regrid-uq", version)]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic study with known truth.
    Synth {
        /// Truth configuration; the built-in default study when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit transforms, covariance parameters and drop decisions.
    Fit {
        #[arg(long)]
        manifest: PathBuf,
        /// Study configuration; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output model file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the naive and/or two-step Bayesian regressions.
    Analyze {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "both")]
        mode: AnalysisMode,
        #[arg(long)]
        out: PathBuf,
        /// Also write every pooled posterior draw.
        #[arg(long)]
        emit_draws: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Leave-one-year-out evaluation of both paths.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Join evaluation summaries into one table.
    Report {
        /// Directories holding eval_summary.csv; defaults to --out.
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidArgument(
                "--threads must be at least 1".into(),
            ));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    match cli.command {
        Command::Synth { config, out } => {
            cmd_synth(config.as_deref(), &out)?;
        }
        Command::Fit {
            manifest,
            config,
            out,
            seed,
        } => {
            cmd_fit(&manifest, config.as_deref(), &out, seed)?;
        }
        Command::Analyze {
            manifest,
            model,
            mode,
            out,
            emit_draws,
            seed,
        } => {
            cmd_analyze(&manifest, &model, mode, &out, emit_draws, seed)?;
        }
        Command::Eval {
            manifest,
            model,
            out,
            seed,
        } => {
            cmd_eval(&manifest, &model, &out, seed)?;
        }
        Command::Report { inputs, out } => {
            let inputs = if inputs.is_empty() {
                vec![out.clone()]
            } else {
                inputs
            };
            cmd_report(&inputs, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("REGRID_UQ_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
