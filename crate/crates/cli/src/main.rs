// SPDX-License-Identifier: MIT OR Apache-2.0

//! `zoomcp`: quantile tables, sampling plans, live runs and Monte Carlo studies.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod run;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use zoomcp::cpp_limit::{estimate_quantiles, prob_grid, save_quantiles, ArgminStat};
use zoomcp::harness::{preset, run_study, McConfig, PRESETS};
use zoomcp::model::ErrorDist;
use zoomcp::rng::StreamSeed;

#[derive(Parser, Debug)]
#[command(
    name = "zoomcp",
    version,
    about = "Multistage adaptive change-point estimation"
)]
struct Cli {
    /// Base seed for every random stream.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate limit-law quantiles and write them as a JSON table.
    Quantiles {
        /// Signal-to-noise ratio of the limit process.
        #[arg(long)]
        snr: f64,
        /// Miss levels whose `C_zeta` should be reported.
        #[arg(long, value_delimiter = ',', default_value = "0.0005")]
        zeta: Vec<f64>,
        /// Interval levels whose tail quantiles should be reported.
        #[arg(long, value_delimiter = ',', default_value = "0.05")]
        tau: Vec<f64>,
        /// Number of simulated limit paths.
        #[arg(long, default_value_t = 2_000_000)]
        reps: usize,
        /// Error distribution behind the jump sizes.
        #[arg(long, value_enum, default_value = "normal")]
        error_dist: DistArg,
        /// Output JSON table.
        #[arg(long)]
        out: PathBuf,
    },
    /// Resolve a run configuration into stage sizes, window constants and widths.
    Plan {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Execute the adaptive procedure against an oracle and report intervals.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// `model`, `pool:PATH` or `exec:CMD`.
        #[arg(long, default_value = "model")]
        oracle: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a Monte Carlo study from a config file or a named preset.
    Mc {
        /// Study config (JSON).
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// Named study: table1..table5, fig2, fig3, allocation, rate.
        #[arg(long)]
        preset: Option<String>,
        /// Override the replicate count.
        #[arg(long)]
        replicates: Option<usize>,
        /// Override the limit-law replicate count.
        #[arg(long)]
        quantile_reps: Option<usize>,
        /// Directory for cached quantile tables.
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        /// CSV report (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Config and full report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        /// ARE curve data (ARE studies only).
        #[arg(long)]
        plot: Option<PathBuf>,
    },
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum DistArg {
    Normal,
    Laplace,
    Uniform,
}

impl From<DistArg> for ErrorDist {
    fn from(d: DistArg) -> Self {
        match d {
            DistArg::Normal => ErrorDist::Normal,
            DistArg::Laplace => ErrorDist::Laplace,
            DistArg::Uniform => ErrorDist::Uniform,
        }
    }
}

const EXIT_VALIDATION: u8 = 2;
const EXIT_RUNTIME: u8 = 3;
const EXIT_ORACLE: u8 = 4;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<zoomcp::Error>() {
            if e.is_oracle_failure() {
                return EXIT_ORACLE;
            }
            if e.is_validation() {
                return EXIT_VALIDATION;
            }
            return EXIT_RUNTIME;
        }
        if cause.downcast_ref::<config::ConfigError>().is_some() {
            return EXIT_VALIDATION;
        }
    }
    EXIT_RUNTIME
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Quantiles {
            snr,
            zeta,
            tau,
            reps,
            error_dist,
            out,
        } => cmd_quantiles(snr, &zeta, &tau, reps, error_dist.into(), cli.seed, &out),
        Command::Plan { config, out } => run::cmd_plan(&config, cli.seed, out.as_deref()),
        Command::Run {
            config,
            oracle,
            out,
        } => run::cmd_run(&config, &oracle, cli.seed, out.as_deref()),
        Command::Mc {
            config,
            preset,
            replicates,
            quantile_reps,
            cache_dir,
            out,
            json,
            plot,
        } => cmd_mc(
            config,
            preset,
            replicates,
            quantile_reps,
            cache_dir,
            cli.seed,
            out,
            json,
            plot,
        ),
    }
}

fn cmd_quantiles(
    snr: f64,
    zetas: &[f64],
    taus: &[f64],
    reps: usize,
    error_dist: ErrorDist,
    seed: u64,
    out: &Path,
) -> Result<()> {
    if !(snr > 0.0) {
        return Err(config::ConfigError::new(format!("snr must be positive, got {snr}")).into());
    }
    let mut extra: Vec<f64> = zetas.to_vec();
    extra.extend(taus.iter().map(|t| t / 2.0));
    let grid = prob_grid(&extra);
    let q = estimate_quantiles(snr, error_dist, reps, &grid, StreamSeed::new(seed))?;
    save_quantiles(&q, out).with_context(|| format!("writing {}", out.display()))?;
    for &z in zetas {
        println!("C_zeta({z}) = {}", q.c_zeta(z)?);
    }
    for &t in taus {
        let a = q.quantile(ArgminStat::Lower, t / 2.0)?;
        let b = q.quantile(ArgminStat::Upper, 1.0 - t / 2.0)?;
        println!("tau {t}: conservative (a, b) = ({a}, {b})");
        for (name, stat) in [
            ("d_l", ArgminStat::Lower),
            ("d_u", ArgminStat::Upper),
            ("d_av", ArgminStat::Average),
        ] {
            let lo = q.quantile(stat, t / 2.0)?;
            let hi = q.quantile(stat, 1.0 - t / 2.0)?;
            println!("tau {t}: exact {name} (a, b) = ({lo}, {hi})");
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_mc(
    config: Option<PathBuf>,
    preset_name: Option<String>,
    replicates: Option<usize>,
    quantile_reps: Option<usize>,
    cache_dir: Option<PathBuf>,
    seed: u64,
    out: Option<PathBuf>,
    json: Option<PathBuf>,
    plot: Option<PathBuf>,
) -> Result<()> {
    let mut cfg: McConfig = match (config, preset_name) {
        (Some(path), None) => config::read_json(&path)?,
        (None, Some(name)) => preset(&name, seed)?,
        _ => {
            return Err(config::ConfigError::new(format!(
                "pass --config PATH or --preset NAME (one of {})",
                PRESETS.join(", ")
            ))
            .into())
        }
    };
    if let Some(r) = replicates {
        cfg.replicates = r;
    }
    if let Some(r) = quantile_reps {
        cfg.quantiles.reps = r;
    }
    if cache_dir.is_some() {
        cfg.quantiles.cache_dir = cache_dir;
    }
    let report = run_study(&cfg)?;
    match &out {
        Some(path) => report.write_csv(BufWriter::new(create(path)?))?,
        None => report.write_csv(std::io::stdout().lock())?,
    }
    if let Some(path) = json {
        let mut w = BufWriter::new(create(&path)?);
        serde_json::to_writer_pretty(
            &mut w,
            &serde_json::json!({ "config": cfg, "report": report }),
        )?;
        writeln!(w)?;
    }
    if let Some(path) = plot {
        report.write_plot_csv(BufWriter::new(create(&path)?))?;
    }
    if let Some(s) = report.rate_slope {
        eprintln!("log-log slope of median |error| on n: {s:.4}");
    }
    Ok(())
}

pub(crate) fn create(path: &Path) -> Result<File> {
    File::create(path).with_context(|| format!("creating {}", path.display()))
}
