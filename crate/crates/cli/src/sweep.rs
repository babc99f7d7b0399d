//! Batch sweeps: one CSV row per configuration plus a JSON sidecar with the
//! full reports. Individual failures become rows, never aborts.

use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::report::RunReport;
use crate::runner::{run_to_disk, RunOptions};

/// Fixed CSV schema; tested against a golden header.
pub const CSV_HEADER: &str = "problem,k,N,dt,backend,seed,R_E,wall_seconds";

/// Outcome of one sweep entry in the JSON sidecar.
#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum SweepEntry {
    Ok { report: RunReport },
    Error { config: RunConfig, error: String },
}

/// Sweep execution options.
#[derive(Debug, Clone, Default)]
pub struct SweepOptions {
    pub run: RunOptions,
    /// Run independent configs on worker threads (per-config RNG state is
    /// already isolated by construction).
    pub parallel: bool,
}

fn csv_row(cfg: &RunConfig, r_e: Option<f64>, wall: f64) -> String {
    let r_e_text = match r_e {
        Some(v) if v.is_finite() => format!("{v}"),
        _ => "nan".to_string(),
    };
    format!(
        "{},{},{},{},{},{},{},{}\n",
        cfg.problem,
        cfg.k,
        cfg.n,
        cfg.dt,
        cfg.backend.as_str(),
        cfg.seed,
        r_e_text,
        wall
    )
}

/// Run every config, writing `sweep.csv` and `sweep.json` under `out_dir`
/// (run artifacts land in per-config subdirectories). Returns the number of
/// failed rows.
pub fn sweep(configs: &[RunConfig], out_dir: &Path, opts: &SweepOptions) -> Result<usize> {
    if configs.is_empty() {
        bail!("no runnable configs");
    }
    std::fs::create_dir_all(out_dir).context("creating sweep output dir")?;

    let n = configs.len();
    let results: Vec<Mutex<Option<SweepEntry>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let worker = || {
        loop {
            let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            if i >= n {
                break;
            }
            let cfg = &configs[i];
            let entry = match run_to_disk(cfg, out_dir, &opts.run) {
                Ok(report) => SweepEntry::Ok { report },
                Err(e) => SweepEntry::Error {
                    config: cfg.clone(),
                    error: format!("{e:#}"),
                },
            };
            *results[i].lock().unwrap() = Some(entry);
        }
    };
    if opts.parallel {
        let workers = std::thread::available_parallelism()
            .map(|v| v.get())
            .unwrap_or(1)
            .min(n);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(worker);
            }
        });
    } else {
        worker();
    }

    let entries: Vec<SweepEntry> = results
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("worker filled every slot"))
        .collect();

    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    let mut failures = 0usize;
    for (cfg, entry) in configs.iter().zip(&entries) {
        match entry {
            SweepEntry::Ok { report } => {
                csv.push_str(&csv_row(cfg, Some(report.r_e), report.wall_seconds));
            }
            SweepEntry::Error { .. } => {
                failures += 1;
                csv.push_str(&csv_row(cfg, None, 0.0));
            }
        }
    }
    let mut csv_file =
        std::fs::File::create(out_dir.join("sweep.csv")).context("creating sweep.csv")?;
    csv_file.write_all(csv.as_bytes())?;
    let json = serde_json::to_string_pretty(&entries).context("serialising sweep sidecar")?;
    std::fs::write(out_dir.join("sweep.json"), json).context("writing sweep.json")?;
    Ok(failures)
}

/// The benchmark grid used for the accuracy tables: `dt = 0.05` with
/// `N in {10, 15, 20, 50}` and `dt = 0.5/30` with `N in {30, 50}`, for
/// `k in {2, 3}`.
pub fn paper_grid(problem: &str, base: &RunConfig) -> Vec<RunConfig> {
    let mut configs = Vec::new();
    for k in [2usize, 3] {
        for (n, steps) in [(10usize, 10usize), (15, 10), (20, 10), (50, 10), (30, 30), (50, 30)] {
            let mut cfg = base.clone();
            cfg.problem = problem.to_string();
            cfg.k = k;
            cfg.n = n;
            cfg.dt = cfg.horizon / steps as f64;
            configs.push(cfg);
        }
    }
    configs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Backend;

    #[test]
    fn csv_header_golden() {
        assert_eq!(CSV_HEADER, "problem,k,N,dt,backend,seed,R_E,wall_seconds");
    }

    #[test]
    fn empty_sweep_is_an_error() {
        let err = sweep(&[], Path::new("/tmp"), &SweepOptions::default()).unwrap_err();
        assert!(err.to_string().contains("no runnable configs"));
    }

    #[test]
    fn paper_grid_has_twelve_rows_per_problem() {
        let base = RunConfig::with_seed(1);
        let grid = paper_grid("example1", &base);
        assert_eq!(grid.len(), 12);
        assert!(grid.iter().all(|c| c.validate().is_ok()));
        assert_eq!(grid.iter().filter(|c| c.k == 2).count(), 6);
        assert_eq!(grid.iter().filter(|c| c.n == 50).count(), 4);
    }

    #[test]
    fn sweep_records_failures_as_rows() {
        let dir = std::env::temp_dir().join(format!("bspde-sweep-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        let mut good = RunConfig::with_seed(4);
        good.backend = Backend::Lsmc;
        good.n = 4;
        good.k = 1;
        good.lsmc.paths = 200;
        good.lsmc.degree = 2;
        // Rank-deficient on purpose: absurd degree with almost no paths.
        let mut bad = good.clone();
        bad.lsmc.paths = 3;
        bad.lsmc.degree = 9;
        let failures = sweep(
            &[good, bad],
            &dir,
            &SweepOptions {
                run: RunOptions {
                    omit_walltime: true,
                    energy_diagnostics: false,
                },
                parallel: false,
            },
        )
        .unwrap();
        assert_eq!(failures, 1);
        let csv = std::fs::read_to_string(dir.join("sweep.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], CSV_HEADER);
        assert!(lines[2].contains("nan"));
        let sidecar = std::fs::read_to_string(dir.join("sweep.json")).unwrap();
        assert!(sidecar.contains("rank deficient"));
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
