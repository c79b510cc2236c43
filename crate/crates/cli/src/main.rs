//! `gfnn`: reproducible experiment runs for symplectic maps learned
//! as generating functions, plus the vector-field baselines they are
//! compared against.
//!
//! Every command reads one sectioned `key = value` config file,
//! applies `--set` overrides, writes its outputs and a manifest into
//! the configured output directory, and prints a single
//! machine-parseable `key=value` summary line on stdout.
//!
//! Exit codes: 0 success, 2 configuration rejected, 3 numeric failure
//! (diverged solve, non-finite state), 4 file I/O or format problems.

use clap::{Args, Parser, Subcommand};
use gfnn::Result;
use gfnn_cli::config::{RawConfig, RunConfig};
use gfnn_cli::{commands, exit_code};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "gfnn", version, about = "Train and diagnose learned symplectic maps")]
struct Cli {
    /// Cap the worker threads used by data generation and training.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct ConfArgs {
    /// Run configuration file.
    #[arg(long, short = 'c')]
    config: PathBuf,
    /// Override one config value (repeatable); beats the file.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
}

impl ConfArgs {
    fn resolve(&self, extra: &[String]) -> Result<RunConfig> {
        let mut raw = RawConfig::load(&self.config)?;
        for spec in self.set.iter().chain(extra) {
            raw.set(spec)?;
        }
        RunConfig::resolve(raw)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample initial conditions and integrate the training sequences.
    GenData {
        #[command(flatten)]
        conf: ConfArgs,
    },
    /// Fit a model on an existing dataset.
    Train {
        #[command(flatten)]
        conf: ConfArgs,
    },
    /// Roll a trained or analytic map forward from an initial state.
    Predict {
        #[command(flatten)]
        conf: ConfArgs,
        /// Model file or analytic:<name>; beats predict.model.
        #[arg(long)]
        model: Option<String>,
        /// Number of steps; beats predict.n_steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Compare a predicted trajectory against a reference one.
    Evaluate {
        #[command(flatten)]
        conf: ConfArgs,
        /// Predicted trajectory CSV.
        #[arg(long)]
        pred: PathBuf,
        /// Reference trajectory CSV.
        #[arg(long)]
        truth: PathBuf,
        /// Second prediction reported side by side in the summary.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Extract plane crossings from a trajectory file.
    Poincare {
        #[command(flatten)]
        conf: ConfArgs,
        /// Trajectory CSV to slice.
        #[arg(long)]
        traj: PathBuf,
    },
    /// Per-component histogram divergence between two trajectories.
    Kl {
        #[command(flatten)]
        conf: ConfArgs,
        /// Predicted trajectory CSV.
        #[arg(long)]
        pred: PathBuf,
        /// Reference trajectory CSV.
        #[arg(long)]
        truth: PathBuf,
    },
    /// Tabulate the a-priori error envelope of an Euler rollout.
    Bound {
        /// Lipschitz constant of the true vector field.
        #[arg(long, default_value_t = 1.0)]
        lipschitz: f64,
        /// Uniform error of the learned field on the data region.
        #[arg(long, default_value_t = 0.0)]
        delta: f64,
        /// Integration step size.
        #[arg(long, default_value_t = 0.1)]
        h: f64,
        /// Largest tabulated time.
        #[arg(long = "t-max", default_value_t = 10.0)]
        t_max: f64,
        /// Number of evenly spaced table rows.
        #[arg(long, default_value_t = 100)]
        rows: usize,
        /// Output CSV path.
        #[arg(long, default_value = "bound.csv")]
        out: PathBuf,
    },
}

fn run(cmd: &Cmd) -> Result<String> {
    match cmd {
        Cmd::GenData { conf } => commands::cmd_gen_data(&conf.resolve(&[])?),
        Cmd::Train { conf } => commands::cmd_train(&conf.resolve(&[])?),
        Cmd::Predict { conf, model, steps } => {
            let mut extra = Vec::new();
            if let Some(m) = model {
                extra.push(format!("predict.model={m}"));
            }
            if let Some(n) = steps {
                extra.push(format!("predict.n_steps={n}"));
            }
            commands::cmd_predict(&conf.resolve(&extra)?)
        }
        Cmd::Evaluate {
            conf,
            pred,
            truth,
            baseline,
        } => commands::cmd_evaluate(&conf.resolve(&[])?, pred, truth, baseline.as_deref()),
        Cmd::Poincare { conf, traj } => commands::cmd_poincare(&conf.resolve(&[])?, traj),
        Cmd::Kl { conf, pred, truth } => commands::cmd_kl(&conf.resolve(&[])?, pred, truth),
        Cmd::Bound {
            lipschitz,
            delta,
            h,
            t_max,
            rows,
            out,
        } => commands::cmd_bound(*lipschitz, *delta, *h, *t_max, *rows, out),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot size the thread pool: {e}");
            std::process::exit(2);
        }
    }
    match run(&cli.command) {
        Ok(summary) => println!("{summary}"),
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = std::error::Error::source(&err);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            std::process::exit(exit_code(&err));
        }
    }
}
