//! `fusionlab`: simulate adaptive fusion experiments, fuse user data, select
//! the next randomized set and emit report tables.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod config;
mod fuse;
mod report;
mod simulate;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fusionlab_core::design::{Hyperparams, Method, QuadraticTerm};
use fusionlab_core::output::atomic_write;

/// Error caused by the invocation rather than by the computation.
#[derive(Debug)]
pub struct UsageError(pub anyhow::Error);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(name = "fusionlab", version, about = "Fuse observational and randomized effect estimates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run replicated multi-round experiments on synthetic data.
    Simulate {
        /// TOML configuration, layered over the preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// smoke, desk or paper_full. Defaults to smoke when no config is given.
        #[arg(long)]
        preset: Option<String>,
        /// Comma-separated list of random, dopt, ucb, thompson.
        #[arg(long, default_value = "random,dopt,ucb,thompson")]
        selector: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; defaults to the available cores.
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Override a configuration value, e.g. `--set experiment.rounds=5`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Estimate and fuse effects from round files.
    Fuse {
        /// Observational round file `obs_round_<m>.csv`; repeatable.
        #[arg(long, required = true)]
        obs: Vec<PathBuf>,
        /// Randomized round file `rct_round_<m>.csv`, optionally `@i,j` with the
        /// 1-based selected set; repeatable.
        #[arg(long)]
        rct: Vec<String>,
        /// Intervention attributes `j,v_1..v_p`.
        #[arg(long)]
        catalog: PathBuf,
        /// identity, intercept, linear or spline[:degree[:knots]].
        #[arg(long, default_value = "linear")]
        features: String,
        /// `identity` (I/J) or comma-separated diagonal loss weights.
        #[arg(long, default_value = "identity")]
        weights: String,
        /// TOML file whose [estimator] section sets the nuisance bases.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Accepted for uniformity; fusion is deterministic.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "fusion_report.json")]
        out: PathBuf,
    },
    /// Choose the next randomized set from a fusion report.
    Select {
        #[arg(long)]
        report: PathBuf,
        #[arg(long, alias = "method", default_value = "thompson")]
        selector: String,
        /// Interventions to select.
        #[arg(long, default_value_t = 1)]
        n: usize,
        /// Randomized records per selected intervention next round.
        #[arg(long, default_value_t = 100)]
        l_next: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = Hyperparams::default().alpha)]
        alpha: f64,
        #[arg(long, default_value_t = Hyperparams::default().eta0)]
        eta0: f64,
        #[arg(long, default_value_t = Hyperparams::default().lambda0)]
        lambda0: f64,
        #[arg(long, default_value_t = Hyperparams::default().ucb_multiplier)]
        ucb_multiplier: f64,
        /// `expected` or `held` treatment of the bias quadratic in predicted risk.
        #[arg(long, default_value = "expected", value_parser = parse_quadratic)]
        quadratic: QuadraticTerm,
        /// Never re-select an intervention that was already randomized.
        #[arg(long)]
        without_replacement: bool,
        #[arg(long, default_value = "decision.csv")]
        out: PathBuf,
    },
    /// Write risk curves and cumulative-risk tables for a simulation run.
    Report {
        /// Directory written by `simulate`.
        #[arg(long)]
        run: PathBuf,
        /// Defaults to `<run>/report`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Accepted for uniformity; reporting is deterministic.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn parse_quadratic(s: &str) -> Result<QuadraticTerm, String> {
    match s {
        "expected" => Ok(QuadraticTerm::Expected),
        "held" => Ok(QuadraticTerm::Held),
        _ => Err(format!("'{s}' is not expected or held")),
    }
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Simulate {
            config,
            preset,
            selector,
            seed,
            jobs,
            out,
            overrides,
        } => {
            let cfg = config::resolve(preset.as_deref(), config.as_deref(), &overrides, seed)?;
            let selectors = config::parse_selectors(&selector)?;
            let jobs = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            simulate::run(&cfg, &selectors, jobs, &out)
        }
        Command::Fuse {
            obs,
            rct,
            catalog,
            features,
            weights,
            config,
            seed: _,
            out,
        } => {
            let args = fuse::FuseArgs {
                obs: &obs,
                rct: &rct,
                catalog: &catalog,
                features: &features,
                weights: &weights,
                settings: fuse::load_estimator_settings(config.as_deref())?,
            };
            let report = fuse::run_fuse(&args)?;
            fuse::write_json(&report, &out)
        }
        Command::Select {
            report,
            selector,
            n,
            l_next,
            seed,
            alpha,
            eta0,
            lambda0,
            ucb_multiplier,
            quadratic,
            without_replacement,
            out,
        } => {
            let method: Method = selector.parse().map_err(|e: fusionlab_core::Error| UsageError(e.into()))?;
            let rep = fuse::read_report(&report)?;
            let args = fuse::SelectArgs {
                method,
                n,
                l_next,
                seed,
                hyper: Hyperparams {
                    alpha,
                    eta0,
                    lambda0,
                    ucb_multiplier,
                    quadratic,
                },
                without_replacement,
            };
            let (round, decision) = fuse::run_select(&rep, &args)?;
            atomic_write(&out, fuse::decision_csv(round, &decision).as_bytes())?;
            Ok(())
        }
        Command::Report { run, out, seed: _ } => {
            let out = out.unwrap_or_else(|| run.join("report"));
            let written = report::run(&run, &out)?;
            eprintln!("report: wrote {} files to {}", written.len(), out.display());
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<fusionlab_core::Error>() {
            if matches!(e, fusionlab_core::Error::Parse { .. }) {
                return 2;
            }
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
