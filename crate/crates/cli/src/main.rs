use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use bspde_cli::config::RunConfig;
use bspde_cli::profile::emit_profile;
use bspde_cli::report::RunReport;
use bspde_cli::runner::{run_to_disk, RunOptions};
use bspde_cli::selftest::run_selftest;
use bspde_cli::sweep::{paper_grid, sweep, SweepOptions};

/// Solver and experiment runner for 1-D nonlinear backward stochastic PDEs
/// with zero-Neumann boundaries (nonzero boundary data must be reduced to
/// the zero case before configuring a problem).
#[derive(Parser)]
#[command(name = "bspde", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration file (flat `key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set k=3` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Mandatory when no config file is given.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn build(&self) -> Result<RunConfig> {
        let mut cfg = match (&self.config, self.seed) {
            (Some(path), _) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                RunConfig::parse(&text)?
            }
            (None, Some(seed)) => RunConfig::with_seed(seed),
            (None, None) => bail!("provide --config or --seed (seeds are never defaulted)"),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        for kv in &self.sets {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set '{kv}' is not KEY=VALUE"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration and write report + checkpoints.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory (artifacts land in `<out>/<config-hash>/`).
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Report wall time as 0 for byte-reproducible artifacts.
        #[arg(long)]
        omit_walltime: bool,
        /// Also estimate the stability-energy functional (LSMC only).
        #[arg(long)]
        energy: bool,
    },
    /// Run many configurations into one CSV table plus a JSON sidecar.
    Sweep {
        /// Configuration files, one run each.
        #[arg(long = "config", value_name = "FILE")]
        configs: Vec<PathBuf>,
        /// Generate the benchmark table grid for a problem
        /// (example1 | example2 | both) instead of reading files.
        #[arg(long, value_name = "PROBLEM")]
        paper_grid: Option<String>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Base seed for generated grids.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Run independent configs concurrently.
        #[arg(long)]
        parallel: bool,
        #[arg(long)]
        omit_walltime: bool,
    },
    /// Export `(x, u_h(x,0), u_0(x))` triples from a run report.
    Profile {
        /// Path to a `report.json` produced by `run` or `sweep`.
        #[arg(long)]
        report: PathBuf,
        /// Number of uniformly spaced sample points.
        #[arg(long, default_value_t = 512)]
        points: usize,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in oracle/property checks.
    Selftest,
}

fn main() -> ExitCode {
    match dispatch() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            out,
            omit_walltime,
            energy,
        } => {
            let cfg = config.build()?;
            let report = run_to_disk(
                &cfg,
                &out,
                &RunOptions {
                    omit_walltime,
                    energy_diagnostics: energy,
                },
            )?;
            println!(
                "{} {} N={} k={} dt={} seed={}: R_E = {:.6e}  ({:.1} s)",
                report.config.problem,
                report.backend,
                report.config.n,
                report.config.k,
                report.config.dt,
                report.seed,
                report.r_e,
                report.wall_seconds
            );
            println!("artifacts: {}", out.join(&report.config_hash).display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep {
            configs,
            paper_grid: grid,
            sets,
            seed,
            out,
            parallel,
            omit_walltime,
        } => {
            let mut runs: Vec<RunConfig> = Vec::new();
            for path in &configs {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                runs.push(RunConfig::parse(&text)?);
            }
            if let Some(which) = grid {
                let seed = seed.context("--paper-grid needs --seed")?;
                let mut base = RunConfig::with_seed(seed);
                for kv in &sets {
                    let (k, v) = kv
                        .split_once('=')
                        .with_context(|| format!("--set '{kv}' is not KEY=VALUE"))?;
                    base.set(k.trim(), v.trim())?;
                }
                let problems: Vec<&str> = match which.as_str() {
                    "both" => vec!["example1", "example2"],
                    p @ ("example1" | "example2") => vec![p],
                    other => bail!("--paper-grid {other}: expected example1|example2|both"),
                };
                for p in problems {
                    runs.extend(paper_grid(p, &base));
                }
            }
            let failures = sweep(
                &runs,
                &out,
                &SweepOptions {
                    run: RunOptions {
                        omit_walltime,
                        energy_diagnostics: false,
                    },
                    parallel,
                },
            )?;
            println!(
                "{} runs, {} failed; table: {}",
                runs.len(),
                failures,
                out.join("sweep.csv").display()
            );
            Ok(if failures == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Profile {
            report,
            points,
            out,
        } => {
            let text = std::fs::read_to_string(&report)
                .with_context(|| format!("reading {}", report.display()))?;
            let report = RunReport::from_json(&text)?;
            let table = emit_profile(&report, points)?;
            match out {
                Some(path) => std::fs::write(&path, table)
                    .with_context(|| format!("writing {}", path.display()))?,
                None => print!("{table}"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Selftest => {
            let failures = run_selftest();
            Ok(if failures == 0 {
                println!("selftest: all checks passed");
                ExitCode::SUCCESS
            } else {
                println!("selftest: {failures} check(s) failed");
                ExitCode::FAILURE
            })
        }
    }
}
