use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use estab_dp::accountant::{compose, AccountantError};
use estab_dp::biassim::{
    ablation_run, case2_factor, case2_montecarlo, case3_expected_guess, case3_montecarlo,
    AblationConfig, AblationTransform, VarianceMode,
};
use estab_dp::dataset::{DatasetError, GroupBySumQuery};
use estab_dp::neighbor::{validate, GridSpec, NeighborError};
use estab_dp::syngen::{generate_establishments, load_cells, SynthParams, SyngenError};
use estab_dp_cli::config::{parse_neighbor, ConfigError, RunConfig};
use estab_dp_cli::pipeline::{cmd_evaluate, cmd_postprocess, cmd_run, PostprocessOptions};
use serde_json::json;

#[derive(Parser)]
#[command(name = "estab-dp", version, about = "Confidentiality-protected releases of establishment statistics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check that a neighbor function is valid; prints the report as JSON.
    ValidateNf {
        /// `sqrt`, `log`, `sqrt_shift:a`, `log_shift:a`, `linear:d`, or JSON.
        spec: String,
        /// Log-spaced grid points checked in addition to breakpoints.
        #[arg(long, default_value_t = 2000)]
        grid_points: usize,
    },
    /// Generate synthetic establishments from county by industry cell totals.
    Synth {
        #[arg(long)]
        cells: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10.0)]
        alpha: f64,
        #[arg(long, default_value_t = 200.0)]
        theta: f64,
        #[arg(long, default_value_t = 0.5)]
        eta: f64,
    },
    /// Run a protected release workload.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Reconstruct microdata from a run's output directory.
    Postprocess {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Constrain reconstructed values to be nonnegative.
        #[arg(long)]
        nonnegative: bool,
        /// Run config, required when answers were released in f-space.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare reconstructed microdata with ground truth.
    Evaluate {
        #[arg(long)]
        microdata: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Evaluation query `grouper/attribute`, repeatable.
        #[arg(long = "query", required = true)]
        queries: Vec<String>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Bias simulations for estimated-variance weighting.
    BiasSim {
        #[command(subcommand)]
        sim: BiasSim,
    },
    /// Compose per-release budgets by root sum of squares.
    Compose {
        /// Budgets to compose.
        #[arg(allow_negative_numbers = true)]
        mus: Vec<f64>,
        /// Repeat the listed budgets this many times.
        #[arg(long, default_value_t = 1)]
        repeat: usize,
        /// Compose the workload of a run config instead.
        #[arg(long, conflicts_with = "mus")]
        config: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Transform {
    Sqrt,
    Log,
    Identity,
}

#[derive(Subcommand)]
enum BiasSim {
    /// Reconstruction MSE with estimated, actual and mixed variances.
    Ablation {
        #[arg(long, value_enum, default_value = "sqrt")]
        transform: Transform,
        #[arg(long, default_value_t = 0.5)]
        delta: f64,
        #[arg(long, default_value_t = 1.0)]
        mu: f64,
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        counties: usize,
        #[arg(long, default_value_t = 2)]
        per_county: usize,
        #[arg(long, default_value_t = 10.0)]
        true_value: f64,
        /// Write the table as CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Squared-error inflation from inverse-gamma variance estimates.
    Case2 {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        tau: f64,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, default_value_t = 10.0)]
        x: f64,
        #[arg(long, default_value_t = 1_000_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Downward bias when variance estimates track the answers.
    Case3 {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        x: f64,
        #[arg(long, default_value_t = 1.0)]
        c: f64,
        #[arg(long, default_value_t = 1_000_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Error category for the JSON error document.
fn error_kind(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if cause.is::<ConfigError>() {
            return "config";
        }
        if cause.is::<AccountantError>() {
            return "budget";
        }
        if cause.is::<NeighborError>() {
            return "neighbor_function";
        }
        if cause.is::<DatasetError>() || cause.is::<SyngenError>() || cause.is::<csv::Error>() {
            return "data";
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
    }
    "error"
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

/// Returns false when the command ran but reports a failed check.
fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::ValidateNf { spec, grid_points } => {
            let f = parse_neighbor(&spec)?;
            let grid = GridSpec {
                points: grid_points,
                ..GridSpec::default()
            };
            let report = validate(&f, &grid)?;
            print_json(&json!({ "function": f.to_string(), "report": report }))?;
            Ok(report.is_pass())
        }
        Command::Synth {
            cells,
            out,
            seed,
            alpha,
            theta,
            eta,
        } => {
            let cells = load_cells(&cells)?;
            let params = SynthParams {
                alpha_prior: alpha,
                theta_prior: theta,
                eta,
            };
            let data = generate_establishments(seed, &cells, &params)?;
            data.save_csv(&out, false)?;
            print_json(&json!({ "cells": cells.len(), "records": data.len(), "out": out }))?;
            Ok(true)
        }
        Command::Run {
            config,
            seed,
            output_dir,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(d) = output_dir {
                cfg.output_dir = d;
            }
            let summary = cmd_run(&cfg.plan()?)?;
            print_json(&serde_json::to_value(summary)?)?;
            Ok(true)
        }
        Command::Postprocess {
            run_dir,
            out,
            nonnegative,
            config,
        } => {
            let plan = config
                .map(|c| RunConfig::load(&c).and_then(|cfg| cfg.plan()))
                .transpose()?;
            let fits = cmd_postprocess(&run_dir, &out, &PostprocessOptions { nonnegative, plan })?;
            print_json(&json!({ "out": out, "attributes": fits }))?;
            Ok(true)
        }
        Command::Evaluate {
            microdata,
            truth,
            queries,
            out_dir,
        } => {
            let queries = queries
                .iter()
                .map(|q| q.parse::<GroupBySumQuery>())
                .collect::<Result<Vec<_>, _>>()?;
            let report = cmd_evaluate(&microdata, &truth, &queries, &out_dir)?;
            report.write_summary(std::io::stdout().lock())?;
            Ok(true)
        }
        Command::BiasSim { sim } => run_bias_sim(sim),
        Command::Compose {
            mus,
            repeat,
            config,
        } => {
            let rows: Vec<(String, f64)> = match config {
                Some(path) => RunConfig::load(&path)?
                    .plan()?
                    .work
                    .iter()
                    .map(|w| (format!("{}/{}", w.label, w.attribute), w.mu))
                    .collect(),
                None => {
                    if mus.is_empty() {
                        bail!("give budgets to compose or --config");
                    }
                    (0..repeat)
                        .flat_map(|_| mus.iter().copied())
                        .enumerate()
                        .map(|(i, m)| (format!("release {}", i + 1), m))
                        .collect()
                }
            };
            let values: Vec<f64> = rows.iter().map(|(_, m)| *m).collect();
            let composed = compose(&values)?;
            let mut out = std::io::stdout().lock();
            writeln!(out, "{:<32} {:>10}", "release", "mu")?;
            for (label, m) in &rows {
                writeln!(out, "{label:<32} {m:>10}")?;
            }
            writeln!(out, "{:<32} {:>10.4}", "composed", composed)?;
            writeln!(out, "{:<32} {:>10.2}", "composed (2 d.p.)", composed)?;
            Ok(true)
        }
    }
}

fn run_bias_sim(sim: BiasSim) -> Result<bool> {
    match sim {
        BiasSim::Ablation {
            transform,
            delta,
            mu,
            trials,
            seed,
            counties,
            per_county,
            true_value,
            out,
        } => {
            let cfg = AblationConfig {
                counties,
                per_county,
                true_value,
                transform: match transform {
                    Transform::Sqrt => AblationTransform::Sqrt,
                    Transform::Log => AblationTransform::Log,
                    Transform::Identity => AblationTransform::Identity,
                },
                delta,
                mu,
                trials,
                seed,
            };
            let table = ablation_run(&cfg, &VarianceMode::ALL)?;
            if table.floor_rate > 0.0 {
                log::info!("variance floor hit on {:.4}% of estimates", 100.0 * table.floor_rate);
            }
            match out {
                Some(path) => {
                    let f = std::fs::File::create(&path)
                        .with_context(|| format!("cannot create {}", path.display()))?;
                    table.write_csv(std::io::BufWriter::new(f))?;
                }
                None => table.write_csv(std::io::stdout().lock())?,
            }
            Ok(true)
        }
        BiasSim::Case2 {
            n,
            tau,
            sigma,
            x,
            trials,
            seed,
        } => {
            let r = case2_montecarlo(n, tau, sigma, x, trials, seed)?;
            let scale = sigma * sigma / n as f64;
            print_json(&json!({
                "n": n,
                "tau": tau,
                "factor_formula": case2_factor(n, tau),
                "factor_empirical": r.squared_error.mean / scale,
                "factor_se": r.squared_error.se / scale,
                "trials": trials,
            }))?;
            Ok(true)
        }
        BiasSim::Case3 {
            n,
            x,
            c,
            trials,
            seed,
        } => {
            let s = case3_montecarlo(n, x, c, trials, seed)?;
            print_json(&json!({
                "n": n,
                "x": x,
                "c": c,
                "expected_formula": case3_expected_guess(n, x, c),
                "mean_empirical": s.mean,
                "se": s.se,
                "trials": trials,
            }))?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => return fail("usage", e.to_string().trim_end()),
    };
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => fail(error_kind(&e), &format!("{e:#}")),
    }
}

fn fail(kind: &str, message: &str) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message }));
    ExitCode::from(2)
}
