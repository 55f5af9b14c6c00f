use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use porofno::{cmd_compare, cmd_eval, cmd_gen, cmd_solve, cmd_train, exit_code, thread_cap};
use porofno_core::io::RunConfig;
use porofno_core::{Error, Result};

/// Permeability prediction for porous media with Fourier neural operators.
#[derive(Parser)]
#[command(name = "porofno", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an unlabeled dataset of synthetic porous media.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated edge lengths.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long)]
        count_per_size: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overwrite an existing output file.
        #[arg(long)]
        force: bool,
    },
    /// Label a dataset with lattice Boltzmann permeabilities.
    Solve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Train a model on a labeled dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a labeled dataset.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the static and adaptive heads side by side.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(config: Option<&Path>) -> Result<RunConfig> {
    config.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn pick(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| Error::Config(format!("missing --{name} (or paths.{name} in the config)")))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(threads) = thread_cap()? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Gen {
            config,
            sizes,
            count_per_size,
            out,
            force,
        } => {
            let mut cfg = load(config.as_deref())?;
            if let Some(sizes) = sizes {
                cfg.corpus.sizes = sizes;
            }
            if let Some(count) = count_per_size {
                cfg.corpus.count_per_size = count;
            }
            let out = pick(out, &cfg.paths.out, "out")?;
            cfg.paths.out = Some(out.clone());
            for s in cmd_gen(&cfg, &out, force)? {
                println!(
                    "n={:<4} count={:<6} porosity mean={:.4} min={:.4} max={:.4}",
                    s.n, s.count, s.mean, s.min, s.max
                );
            }
        }
        Command::Solve {
            config,
            input,
            out,
            force,
        } => {
            let mut cfg = load(config.as_deref())?;
            let input = pick(input, &cfg.paths.data, "in")?;
            let out = pick(out, &cfg.paths.out, "out")?;
            cfg.paths.data = Some(input.clone());
            cfg.paths.out = Some(out.clone());
            let records = cmd_solve(&cfg, &input, &out, force)?;
            let stalled = records.iter().filter(|r| !r.converged).count();
            println!("labeled {} samples, {stalled} did not converge", records.len());
        }
        Command::Train { config, data, out } => {
            let mut cfg = load(config.as_deref())?;
            let data = pick(data, &cfg.paths.data, "data")?;
            let out = pick(out, &cfg.paths.out, "out")?;
            cfg.paths.data = Some(data.clone());
            cfg.paths.out = Some(out.clone());
            print_json(&cmd_train(&cfg, &data, &out)?)?;
        }
        Command::Eval {
            config,
            checkpoint,
            data,
            out,
        } => {
            let cfg = load(config.as_deref())?;
            let checkpoint = pick(checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
            let data = pick(data, &cfg.paths.data, "data")?;
            let out = pick(out, &cfg.paths.out, "out")?;
            print_json(&cmd_eval(&checkpoint, &data, &out)?)?;
        }
        Command::Compare { config, data, out } => {
            let mut cfg = load(config.as_deref())?;
            let data = pick(data, &cfg.paths.data, "data")?;
            let out = pick(out, &cfg.paths.out, "out")?;
            cfg.paths.data = Some(data.clone());
            cfg.paths.out = Some(out.clone());
            print_json(&cmd_compare(&cfg, &data, &out)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
