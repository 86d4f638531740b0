use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use pnprecon::cli::{cmd_certify, cmd_reconstruct, cmd_simulate, cmd_sweep, cmd_train};
use pnprecon::config::ExperimentConfig;
use pnprecon::train::{fmt_f64, Phase};
use pnprecon::Result;

#[derive(Parser)]
#[command(name = "pnprecon", version, about = "Plug-and-play ADMM reconstruction for simulated 2D emission tomography")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    Pre,
    Jac,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate phantoms, counts and OSEM inputs.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the denoiser (PRE, then JAC).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        phase: PhaseArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run ADMM and the OSEM baselines on the test simulations.
    Reconstruct {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep the ADMM penalty parameter.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate the Jacobian spectral norm of 2D - I on test samples.
    Certify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let ds = cmd_simulate(&cfg, out.as_deref())?;
            println!("simulated {} items", ds.items.len());
        }
        Command::Train { config, phase, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let phase = match phase {
                PhaseArg::Pre => Phase::Pre,
                PhaseArg::Jac => Phase::Jac,
            };
            let ckpt = cmd_train(&cfg, phase, out.as_deref())?;
            println!("wrote {}", ckpt.display());
        }
        Command::Reconstruct { config, checkpoint, rho, iters, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let res = cmd_reconstruct(&cfg, checkpoint.as_deref(), rho, iters, out.as_deref())?;
            for r in &res.summary {
                println!("item {:3} {:14} mse {}", r.item, r.method, fmt_f64(r.mse));
            }
            println!("wrote {}", res.dir.display());
        }
        Command::Sweep { config, checkpoint, iters, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let res = cmd_sweep(&cfg, checkpoint.as_deref(), iters, out.as_deref())?;
            for r in &res.report.runs {
                println!(
                    "rho {} primal ratio {:.3e} dual ratio {:.3e} converged {} ll stable {}",
                    fmt_f64(r.rho),
                    r.primal_ratio,
                    r.dual_ratio,
                    r.residuals_converged,
                    r.ll_stable
                );
            }
            if let Some(best) = res.report.best() {
                println!("best rho {}", fmt_f64(best.rho));
            }
            println!("wrote {}", res.dir.display());
        }
        Command::Certify { config, checkpoint, samples, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let res = cmd_certify(&cfg, checkpoint.as_deref(), samples, out.as_deref())?;
            let s = res.summary;
            println!(
                "sigma min {:.4} mean {:.4} max {:.4}, {:.0}% within 1+{}",
                s.min,
                s.mean,
                s.max,
                100.0 * s.fraction_within,
                s.margin
            );
            println!("wrote {}", res.dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
