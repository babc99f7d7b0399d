//! Solution-profile export: `(x, u_h(x, 0), u_0(x))` triples at uniformly
//! spaced points, as plain CSV any plotting tool can read.

use anyhow::{anyhow, bail, Context, Result};

use bspde_core::mesh::Side;
use bspde_core::problems::by_name;

use crate::report::RunReport;

/// Render the profile table for a report. `points` must be positive; the
/// grid includes both domain ends when `points > 1`.
pub fn emit_profile(report: &RunReport, points: usize) -> Result<String> {
    if points == 0 {
        bail!("profile needs at least one point");
    }
    let field = report.u0.to_field()?;
    let spec = by_name(&report.config.problem, report.config.horizon)
        .context("profile reference problem")?;
    let u0 = spec
        .reference_profile()
        .ok_or_else(|| anyhow!("problem has no reference profile"))?;
    let b = field.mesh().domain_length();
    let mut out = String::from("x,u_h,u0\n");
    for i in 0..points {
        let x = if points == 1 {
            0.0
        } else {
            b * i as f64 / (points - 1) as f64
        };
        let uh = field
            .eval(x, Side::LeftLimit)
            .map_err(|e| anyhow!("{e}"))?;
        out.push_str(&format!("{x},{uh},{}\n", u0(x)));
    }
    Ok(out)
}
