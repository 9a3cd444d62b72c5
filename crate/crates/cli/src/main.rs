//! `lcpnp`: solve, score, simulate and audit weighted PnP problems.
//!
//! Exit codes: 0 on success, 1 when a computation or input file fails,
//! 2 for usage errors.

mod commands;
mod io;
mod options;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::Invocation;
use crate::options::UsageError;

#[derive(Parser)]
#[command(name = "lcpnp", version, about = "Linear-covariance PnP losses and oracles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Scene document (JSON).
    #[arg(short, long)]
    input: Option<PathBuf>,
    /// JSON object of options; `--set` takes precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output file; stdout when omitted.
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Seed for sampling and data generation (default 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Option override, repeatable. Dotted keys address sections.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Weighted PnP, from a RANSAC or ground-truth start.
    Solve(Common),
    /// Linear-covariance loss and its gradients at the ground truth.
    Loss(Common),
    /// Toy descent on a generated scene; writes a CSV trace.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Also write the generated scene document here.
        #[arg(long)]
        scene_out: Option<PathBuf>,
        /// Also write a JSON run summary here.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Fraction of correspondences whose 2D gradient points home.
    Correctness(Common),
    /// Monte-Carlo pose covariance against the analytic one.
    McCov(Common),
    /// Per-axis binary codes of the object points.
    Encode(Common),
    /// Gradients of averaging two estimates.
    DemoAveraging(Common),
}

fn invocation(c: &Common) -> anyhow::Result<Invocation> {
    Ok(Invocation {
        input: c.input.clone(),
        output: c.output.clone(),
        seed: c.seed,
        options: options::collect(c.config.as_deref(), &c.set)?,
    })
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Solve(c) => commands::solve(invocation(c)?),
        Command::Loss(c) => commands::loss(invocation(c)?),
        Command::Simulate { common, scene_out, summary } => {
            commands::simulate(invocation(common)?, scene_out.as_deref(), summary.as_deref())
        }
        Command::Correctness(c) => commands::correctness(invocation(c)?),
        Command::McCov(c) => commands::mc_cov(invocation(c)?),
        Command::Encode(c) => commands::encode(invocation(c)?),
        Command::DemoAveraging(c) => commands::demo_averaging(invocation(c)?),
    }
}

fn main() -> ExitCode {
    lcpnp::harness::init_thread_pool();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("lcpnp: usage: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("lcpnp: error: {e:#}");
            ExitCode::from(1)
        }
    }
}
