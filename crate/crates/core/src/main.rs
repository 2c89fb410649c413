use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use wkblab::experiments::{
    run_experiment, ExperimentConfig, ExperimentKind, GridConfig, ParamsConfig,
};
use wkblab::output::emit_outputs;

/// Numerical laboratory for the semiclassical hydrodynamic form of the
/// logarithmic NLS: epsilon sweeps, scheme contraction, cross-validation,
/// corrector rates and norm-machinery checks.
#[derive(Parser)]
#[command(name = "wkblab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Output directory for results.csv / manifest.json / plot.gp.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Seed for all randomized components.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for parallel epsilon runs (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a TOML config file.
    Run(RunArgs),
    /// Epsilon sweep with inline parameters.
    Sweep(SweepArgs),
    /// Fit log-log rates from a results CSV.
    Fit(FitArgs),
    /// Run the norm-machinery invariant suite.
    Check(CheckArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Path to the experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, default_value_t = 2f64.powi(-9))]
    eps_min: f64,
    #[arg(long, default_value_t = 0.25)]
    eps_max: f64,
    #[arg(long, default_value_t = 8)]
    eps_count: usize,
    #[arg(long, default_value_t = 1024)]
    grid_n: usize,
    #[arg(long, default_value_t = 20.0)]
    box_l: f64,
    #[arg(long, default_value_t = 3.0)]
    ell: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 0.5)]
    delta_in: f64,
}

#[derive(Args)]
struct FitArgs {
    /// results.csv produced by a previous run.
    #[arg(long)]
    input: PathBuf,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, default_value_t = 256)]
    grid_n: usize,
    #[arg(long, default_value_t = 20.0)]
    box_l: f64,
}

fn run(cli: Cli) -> Result<bool, Box<dyn std::error::Error>> {
    match cli.command {
        Command::Run(args) => {
            let text = std::fs::read_to_string(&args.config)?;
            let mut cfg = ExperimentConfig::from_toml(&text)?;
            if cfg.seed == 0 {
                cfg.seed = cli.seed;
            }
            cfg.threads = cfg.threads.or(cli.threads);
            let out_dir = cfg
                .out_dir
                .clone()
                .map(PathBuf::from)
                .unwrap_or_else(|| cli.out_dir.clone());
            let record = run_experiment(&cfg)?;
            let ok = record.failures.is_empty();
            for f in &record.failures {
                eprintln!("failure: {f}");
            }
            report_fits(&record);
            emit_outputs(&[record], &cfg, &out_dir)?;
            println!("wrote results to {}", out_dir.display());
            Ok(ok)
        }
        Command::Sweep(args) => {
            let mut cfg = ExperimentConfig::new(ExperimentKind::Sweep);
            cfg.grid = GridConfig { d: 1, n: args.grid_n, l: args.box_l };
            cfg.params = ParamsConfig {
                lambda: args.lambda,
                delta_in: args.delta_in,
                ell: args.ell,
                dt: None,
                t_cap: None,
                k_ell: None,
            };
            cfg.eps_min = Some(args.eps_min);
            cfg.eps_max = Some(args.eps_max);
            cfg.eps_count = Some(args.eps_count);
            cfg.seed = cli.seed;
            cfg.threads = cli.threads;
            let record = run_experiment(&cfg)?;
            let ok = record.failures.is_empty();
            for f in &record.failures {
                eprintln!("failure: {f}");
            }
            report_fits(&record);
            emit_outputs(&[record], &cfg, &cli.out_dir)?;
            println!("wrote results to {}", cli.out_dir.display());
            Ok(ok)
        }
        Command::Fit(args) => {
            let text = std::fs::read_to_string(&args.input)?;
            let mut groups: std::collections::BTreeMap<String, Vec<(f64, f64)>> =
                Default::default();
            for (i, line) in text.lines().enumerate() {
                if i == 0 || line.is_empty() {
                    continue;
                }
                let cols: Vec<&str> = line.trim_end_matches('\r').split(',').collect();
                if cols.len() != 8 || cols[7] == "none" || cols[7] == "error" {
                    continue;
                }
                let eps: f64 = cols[1].parse()?;
                let value: f64 = cols[6].parse().unwrap_or(f64::NAN);
                groups.entry(cols[2].to_string()).or_default().push((eps, value));
            }
            let mut ok = true;
            for (family, pts) in groups {
                match wkblab::experiments::fit_rate(&pts) {
                    Ok((slope, intercept, r2)) => println!(
                        "{family}: slope {slope:.4}, intercept {intercept:.4}, r^2 {r2:.5} ({} points)",
                        pts.len()
                    ),
                    Err(e) => {
                        println!("{family}: fit failed ({e})");
                        ok = false;
                    }
                }
            }
            Ok(ok)
        }
        Command::Check(args) => {
            let mut cfg = ExperimentConfig::new(ExperimentKind::Invariants);
            cfg.grid = GridConfig { d: 1, n: args.grid_n, l: args.box_l };
            cfg.seed = cli.seed;
            let record = run_experiment(&cfg)?;
            for row in &record.rows {
                println!("{}: {:.6e}", row.norm_family, row.error_value);
            }
            let ok = record.failures.is_empty();
            for f in &record.failures {
                eprintln!("violated: {f}");
            }
            emit_outputs(&[record], &cfg, &cli.out_dir)?;
            println!("{}", if ok { "all invariants hold" } else { "invariant violations found" });
            Ok(ok)
        }
    }
}

fn report_fits(record: &wkblab::experiments::RunRecord) {
    for fit in &record.fits {
        println!(
            "{} [{}]: slope {:.4}, r^2 {:.5} ({} points)",
            fit.norm_family, fit.fit_group, fit.slope, fit.r_squared, fit.points_used
        );
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
