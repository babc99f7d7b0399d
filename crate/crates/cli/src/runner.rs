//! Turning a configuration into a finished run: operator assembly, backend
//! dispatch, error metrics, and on-disk artifacts.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};

use bspde_core::basis::{gauss_legendre, BasisKind, BasisSet};
use bspde_core::ldg::{FluxVariant, LdgOperator};
use bspde_core::march::{
    solve_dbdp, solve_lsmc, DbdpConfig, LsmcConfig, SolveResult, TimeGrid, RNG_SCHEME,
};
use bspde_core::mesh::ElementMesh;
use bspde_core::problems::{by_name, relative_error, ProblemSpec};

use crate::config::{Backend, BasisChoice, FluxChoice, RunConfig};
use crate::report::{EnergyReport, FieldDump, RunReport, INIT_SCHEME};

/// Everything assembled from a config short of running a backend.
pub struct Workbench {
    pub spec: ProblemSpec,
    pub operator: LdgOperator,
    pub grid: TimeGrid,
}

/// Build problem, mesh, basis, operator and time grid for a config.
pub fn assemble(cfg: &RunConfig) -> Result<Workbench> {
    cfg.validate()?;
    let spec = by_name(&cfg.problem, cfg.horizon)
        .with_context(|| format!("loading problem '{}'", cfg.problem))?;
    spec.validate().context("problem invariants")?;
    let mesh = Arc::new(
        ElementMesh::uniform(spec.domain_length(), cfg.n).context("building the mesh")?,
    );
    let kind = match cfg.basis {
        BasisChoice::Legendre => BasisKind::Legendre,
        BasisChoice::Lagrange => BasisKind::Lagrange,
    };
    let q = if cfg.quad_order == 0 {
        cfg.k + 2
    } else {
        cfg.quad_order
    };
    let basis = Arc::new(
        BasisSet::new(kind, cfg.k, gauss_legendre(q)?).context("building the basis")?,
    );
    let flux = match cfg.flux {
        FluxChoice::Default => FluxVariant::UMinusPPlus,
        FluxChoice::Alternate => FluxVariant::UPlusPMinus,
    };
    let operator = LdgOperator::new(mesh, basis, spec.coefficients().clone(), flux)
        .context("assembling the LDG operator")?;
    let grid = TimeGrid::uniform(cfg.horizon, cfg.n_steps()).context("building the time grid")?;
    Ok(Workbench {
        spec,
        operator,
        grid,
    })
}

/// Execute the configured backend.
pub fn solve(bench: &Workbench, cfg: &RunConfig, energy_diagnostics: bool) -> Result<SolveResult> {
    let res = match cfg.backend {
        Backend::Dbdp => solve_dbdp(
            &bench.operator,
            &bench.grid,
            &DbdpConfig {
                batch_size: cfg.dbdp.batch,
                steps_per_stage: cfg.dbdp.steps,
                learning_rate: cfg.dbdp.lr,
                lr_decay: cfg.dbdp.lr_decay,
                lr_decay_every: cfg.dbdp.lr_decay_every,
                warm_start: cfg.dbdp.warm_start,
                seed: cfg.seed,
            },
        ),
        Backend::Lsmc => solve_lsmc(
            &bench.operator,
            &bench.grid,
            &LsmcConfig {
                n_paths: cfg.lsmc.paths,
                degree: cfg.lsmc.degree,
                seed: cfg.seed,
                energy_diagnostics,
            },
        ),
    };
    res.map_err(|e| anyhow!("{e}")).with_context(|| {
        format!(
            "backend {} failed for config:\n{}",
            cfg.backend.as_str(),
            cfg.to_kv()
        )
    })
}

/// Run options beyond the config itself.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Report wall time as 0 for byte-reproducible artifacts.
    pub omit_walltime: bool,
    /// Also estimate the stability-energy functional (LSMC only).
    pub energy_diagnostics: bool,
}

/// Run one configuration and build its report.
pub fn run(cfg: &RunConfig, opts: &RunOptions) -> Result<(RunReport, SolveResult)> {
    let bench = assemble(cfg)?;
    let started = Instant::now();
    let res = solve(&bench, cfg, opts.energy_diagnostics)?;
    let wall = started.elapsed().as_secs_f64();
    let u0 = bench
        .spec
        .reference_profile()
        .ok_or_else(|| anyhow!("problem '{}' has no reference profile", cfg.problem))?;
    let r_e = relative_error(res.u0_field(), u0)
        .map_err(|e| anyhow!("{e}"))
        .context("computing the relative error")?;
    let report = RunReport {
        config_hash: cfg.hash(),
        config: cfg.clone(),
        backend: res.backend().into(),
        seed: cfg.seed,
        r_e,
        per_step: res.per_step().to_vec(),
        wall_seconds: if opts.omit_walltime { 0.0 } else { wall },
        version: env!("CARGO_PKG_VERSION").into(),
        rng_scheme: RNG_SCHEME.into(),
        init_scheme: INIT_SCHEME.into(),
        u0: FieldDump::from_field(res.u0_field(), cfg.basis, cfg.quad_order),
        energy: res.energy().map(|e| EnergyReport {
            sup_u_sq: e.sup_u_sq,
            int_v_sq: e.int_v_sq,
            int_psi_sq: e.int_psi_sq,
            terminal_sq: e.terminal_sq,
            gamma0_sq: e.gamma0_sq,
        }),
    };
    Ok((report, res))
}

/// Run and persist artifacts under `out_dir/<config-hash>/`: `report.json`
/// plus one checkpoint per DBDP stage. Writes go to a temporary directory
/// first so failed runs leave nothing behind.
pub fn run_to_disk(cfg: &RunConfig, out_dir: &Path, opts: &RunOptions) -> Result<RunReport> {
    let (report, res) = run(cfg, opts)?;
    let final_dir = out_dir.join(report.config_hash.clone());
    let tmp_dir = out_dir.join(format!(".tmp-{}", report.config_hash));
    if tmp_dir.exists() {
        std::fs::remove_dir_all(&tmp_dir).context("clearing stale temp dir")?;
    }
    std::fs::create_dir_all(&tmp_dir).context("creating output dir")?;
    let write = || -> Result<()> {
        std::fs::write(tmp_dir.join("report.json"), report.to_json()?)?;
        for (i, bytes) in res.stage_checkpoints().iter().enumerate() {
            std::fs::write(tmp_dir.join(format!("stage_{i:03}.bin")), bytes)?;
        }
        Ok(())
    };
    if let Err(e) = write() {
        let _ = std::fs::remove_dir_all(&tmp_dir);
        return Err(e).context("writing run artifacts");
    }
    if final_dir.exists() {
        std::fs::remove_dir_all(&final_dir).context("replacing previous run dir")?;
    }
    std::fs::rename(&tmp_dir, &final_dir).context("publishing run artifacts")?;
    Ok(report)
}

/// Artifact directory for a config under `out_dir`.
pub fn run_dir(out_dir: &Path, cfg: &RunConfig) -> PathBuf {
    out_dir.join(cfg.hash())
}

/// Reject impossible requests early with the full context.
pub fn preflight(cfg: &RunConfig) -> Result<()> {
    if by_name(&cfg.problem, cfg.horizon).is_err() {
        bail!(
            "unknown problem '{}' in config:\n{}",
            cfg.problem,
            cfg.to_kv()
        );
    }
    cfg.validate()
}
