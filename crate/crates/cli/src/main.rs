use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use dsr_cli::{cmd_analyze, cmd_eval, cmd_train, AnalyzeKind, AnalyzeOptions, RunConfig};

#[derive(Parser)]
#[command(name = "dsr", version, about = "Train, evaluate and analyze spiking networks")]
struct Cli {
    /// Worker threads for tensor kernels (0 = all cores).
    #[arg(long, global = true, env = "DSR_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write metrics, checkpoints and the resolved config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory; defaults to `output.dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        deterministic: bool,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on the configured test set.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also evaluate with weights quantized to this many bits.
        #[arg(long, value_parser = clap::value_parser!(u32).range(2..=32))]
        quant_bits: Option<u32>,
    },
    /// Run a sweep and write its CSV.
    Analyze {
        #[arg(value_enum)]
        kind: Kind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        v_th: f64,
        #[arg(long, default_value_t = 5)]
        time_steps: usize,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, default_value_t = -0.5, allow_negative_numbers = true)]
        grid_min: f64,
        #[arg(long, default_value_t = 1.5, allow_negative_numbers = true)]
        grid_max: f64,
        #[arg(long, default_value_t = 200)]
        grid_points: usize,
        /// Comma-separated time-step counts for convergence and lif-bound.
        #[arg(long, value_delimiter = ',', default_values_t = [16, 64, 256, 1024])]
        n_list: Vec<usize>,
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        #[arg(long, default_value_t = 0.05)]
        dt: f64,
        /// Input noise amplitude for the decomposition sweep.
        #[arg(long, default_value_t = 0.2)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Staircase,
    Convergence,
    Decomposition,
    LifBound,
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("cannot configure thread pool")?;
    }
    match cli.command {
        Command::Train {
            config,
            out,
            seed,
            deterministic,
            epochs,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            cfg.train.deterministic |= deterministic;
            let out = out
                .or_else(|| cfg.output.dir.clone())
                .context("no run directory: pass --out or set output.dir")?;
            let outcome = cmd_train(&cfg, &out)?;
            if let Some(m) = outcome.metrics.last() {
                println!(
                    "epoch {} train_acc {:.4} test_acc {:.4}",
                    m.epoch, m.train_acc, m.test_acc
                );
            }
            println!("checkpoint {}", outcome.checkpoint.display());
        }
        Command::Eval {
            config,
            checkpoint,
            quant_bits,
        } => {
            let cfg = RunConfig::load(&config)?;
            print!("{}", cmd_eval(&cfg, &checkpoint, quant_bits)?.render());
        }
        Command::Analyze {
            kind,
            out,
            v_th,
            time_steps,
            alpha,
            grid_min,
            grid_max,
            grid_points,
            n_list,
            tau,
            dt,
            noise,
            seed,
        } => {
            let kind = match kind {
                Kind::Staircase => AnalyzeKind::Staircase,
                Kind::Convergence => AnalyzeKind::Convergence,
                Kind::Decomposition => AnalyzeKind::Decomposition,
                Kind::LifBound => AnalyzeKind::LifBound,
            };
            let opts = AnalyzeOptions {
                kind,
                v_th,
                time_steps,
                alpha,
                grid_min,
                grid_max,
                grid_points,
                n_list,
                tau,
                dt,
                noise,
                seed,
            };
            let (path, _) = cmd_analyze(&opts, &out)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
