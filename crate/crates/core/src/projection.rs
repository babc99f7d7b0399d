//! Cellwise projections into the broken polynomial space: the plain L2
//! projection and the two Gauss-Radau variants that additionally interpolate
//! one cell endpoint. The Gauss-Radau projections drive the optimal-order
//! error split, and double as consistency oracles for the spatial operators.

use alloc::sync::Arc;
use alloc::vec;

use crate::basis::{legendre, BasisSet};
use crate::linalg::Lu;
use crate::mesh::{CoefField, ElementMesh};
use crate::{Error, Result};

/// Reusable L2 projector: the reference Gram factorisation is shared across
/// calls, which matters when projecting per Monte Carlo path.
pub struct L2Projector {
    mesh: Arc<ElementMesh>,
    basis: Arc<BasisSet>,
    lu: Lu,
}

impl L2Projector {
    pub fn new(mesh: Arc<ElementMesh>, basis: Arc<BasisSet>) -> Self {
        let lu = Lu::factor(&basis.gram(), basis.dim()).expect("basis Gram matrix is nonsingular");
        L2Projector { mesh, basis, lu }
    }

    /// Project into a raw cell-major coefficient slice; `rhs` is scratch of
    /// length `k + 1`.
    pub fn project_into(&self, mut u: impl FnMut(f64) -> f64, out: &mut [f64], rhs: &mut [f64]) {
        let dim = self.basis.dim();
        let quad = self.basis.quad();
        debug_assert_eq!(out.len(), self.mesh.n_cells() * dim);
        debug_assert_eq!(rhs.len(), dim);
        for j in 0..self.mesh.n_cells() {
            rhs.iter_mut().for_each(|r| *r = 0.0);
            for (iq, (&xi, &w)) in quad.nodes().iter().zip(quad.weights()).enumerate() {
                let val = u(self.mesh.to_physical(j, xi));
                let phi = self.basis.phi_at_quad(iq);
                for l in 0..dim {
                    rhs[l] += w * val * phi[l];
                }
            }
            // The h_j/2 scale cancels between Gram and moments.
            let cell = &mut out[j * dim..(j + 1) * dim];
            cell.copy_from_slice(rhs);
            self.lu.solve_in_place(cell);
        }
    }

    pub fn project(&self, u: impl FnMut(f64) -> f64) -> CoefField {
        let mut field = CoefField::zeros(self.mesh.clone(), self.basis.clone());
        let mut rhs = vec![0.0; self.basis.dim()];
        self.project_into(u, field.raw_mut(), &mut rhs);
        field
    }
}

/// L2 projection: on every cell, match moments against the full local space.
pub fn project_l2(
    u: impl FnMut(f64) -> f64,
    mesh: &Arc<ElementMesh>,
    basis: &Arc<BasisSet>,
) -> CoefField {
    L2Projector::new(mesh.clone(), basis.clone()).project(u)
}

/// Which cell endpoint a Gauss-Radau projection interpolates exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RadauEnd {
    Left,
    Right,
}

fn project_gauss_radau(
    mut u: impl FnMut(f64) -> f64,
    mesh: &Arc<ElementMesh>,
    basis: &Arc<BasisSet>,
    end: RadauEnd,
) -> Result<CoefField> {
    let dim = basis.dim();
    let k = basis.degree();
    let quad = basis.quad();
    let mut field = CoefField::zeros(mesh.clone(), basis.clone());

    // Rows 0..k-1: moments against the first k Legendre modes (a
    // basis-independent test surface for P^{k-1}); row k: endpoint match.
    let mut sys = vec![0.0; dim * dim];
    for (iq, (&xi, &w)) in quad.nodes().iter().zip(quad.weights()).enumerate() {
        let phi = basis.phi_at_quad(iq);
        for m in 0..k {
            let lm = legendre(m, xi);
            for l in 0..dim {
                sys[m * dim + l] += w * lm * phi[l];
            }
        }
    }
    let endpoint = match end {
        RadauEnd::Left => basis.phi_left(),
        RadauEnd::Right => basis.phi_right(),
    };
    sys[k * dim..(k + 1) * dim].copy_from_slice(endpoint);
    let lu = Lu::factor(&sys, dim).ok_or(Error::DegenerateBasis {
        cell: 0,
        condition: f64::INFINITY,
    })?;

    let mut rhs = vec![0.0; dim];
    for j in 0..mesh.n_cells() {
        rhs.iter_mut().for_each(|r| *r = 0.0);
        for (&xi, &w) in quad.nodes().iter().zip(quad.weights()) {
            let val = u(mesh.to_physical(j, xi));
            for m in 0..k {
                rhs[m] += w * val * legendre(m, xi);
            }
        }
        rhs[k] = match end {
            RadauEnd::Left => u(mesh.edges()[j]),
            RadauEnd::Right => u(mesh.edges()[j + 1]),
        };
        let coef = lu.solve(&rhs);
        field.cell_mut(j).copy_from_slice(&coef);
    }
    Ok(field)
}

/// Gauss-Radau projection interpolating each cell's left endpoint:
/// `P+ u(x_{j-1/2}+) = u(x_{j-1/2})` plus `k` moment conditions.
pub fn project_gr_plus(
    u: impl FnMut(f64) -> f64,
    mesh: &Arc<ElementMesh>,
    basis: &Arc<BasisSet>,
) -> Result<CoefField> {
    project_gauss_radau(u, mesh, basis, RadauEnd::Left)
}

/// Gauss-Radau projection interpolating each cell's right endpoint:
/// `P- u(x_{j+1/2}-) = u(x_{j+1/2})` plus `k` moment conditions.
pub fn project_gr_minus(
    u: impl FnMut(f64) -> f64,
    mesh: &Arc<ElementMesh>,
    basis: &Arc<BasisSet>,
) -> Result<CoefField> {
    project_gauss_radau(u, mesh, basis, RadauEnd::Right)
}
