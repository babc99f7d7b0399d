//! Machine-readable run reports: everything needed to audit or replay a run
//! and to regenerate solution profiles without re-solving.

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use bspde_core::basis::{BasisKind, BasisSet};
use bspde_core::mesh::{CoefField, ElementMesh};

use crate::config::{BasisChoice, RunConfig};

/// Weight initialisation convention, recorded for reproducibility.
pub const INIT_SCHEME: &str =
    "weights uniform in +-1/sqrt(fan_in), biases 0, batch-norm scale 1 shift 0, \
     running stats (0, 1), momentum 0.9, eps 1e-5";

/// Stability-energy estimates carried over from an LSMC run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnergyReport {
    pub sup_u_sq: f64,
    pub int_v_sq: f64,
    pub int_psi_sq: f64,
    pub terminal_sq: f64,
    pub gamma0_sq: f64,
}

/// The stored time-zero field: enough to re-evaluate the solution anywhere.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldDump {
    pub n: usize,
    pub k: usize,
    pub domain_length: f64,
    pub basis: BasisChoice,
    pub quad_order: usize,
    /// Cell-major coefficients, `n * (k + 1)` entries.
    pub coef: Vec<f64>,
}

impl FieldDump {
    pub fn from_field(field: &CoefField, basis: BasisChoice, quad_order: usize) -> Self {
        FieldDump {
            n: field.mesh().n_cells(),
            k: field.basis().degree(),
            domain_length: field.mesh().domain_length(),
            basis,
            quad_order,
            coef: field.raw().to_vec(),
        }
    }

    /// Rebuild the coefficient field.
    pub fn to_field(&self) -> Result<CoefField> {
        let mesh = Arc::new(
            ElementMesh::uniform(self.domain_length, self.n).context("field dump mesh")?,
        );
        let kind = match self.basis {
            BasisChoice::Legendre => BasisKind::Legendre,
            BasisChoice::Lagrange => BasisKind::Lagrange,
        };
        let quad = bspde_core::basis::gauss_legendre(if self.quad_order == 0 {
            self.k + 2
        } else {
            self.quad_order
        })
        .context("field dump quadrature")?;
        let basis = Arc::new(BasisSet::new(kind, self.k, quad).context("field dump basis")?);
        CoefField::from_raw(mesh, basis, self.coef.clone()).context("field dump coefficients")
    }
}

/// Full record of one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub config_hash: String,
    pub backend: String,
    pub seed: u64,
    pub r_e: f64,
    /// Final training loss per stage (DBDP) or mean squared regression
    /// residual per step (LSMC).
    pub per_step: Vec<f64>,
    pub wall_seconds: f64,
    pub version: String,
    pub rng_scheme: String,
    pub init_scheme: String,
    pub u0: FieldDump,
    pub energy: Option<EnergyReport>,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).context("serialising run report")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).context("parsing run report")
    }
}
