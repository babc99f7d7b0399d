//! The partition of `[0, b]`, broken polynomial fields on it, and the
//! per-cell mass matrices.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::basis::BasisSet;
use crate::linalg::Lu;
use crate::{Error, Result};

/// Partition of `[0, b]` into `N` cells.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementMesh {
    edges: Vec<f64>,
    widths: Vec<f64>,
    h_max: f64,
}

impl ElementMesh {
    /// Mesh from explicit cell edges `x_{1/2} < ... < x_{N+1/2}` with
    /// `x_{1/2} = 0`.
    pub fn from_edges(edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 3 {
            return Err(Error::invalid("mesh needs at least 2 cells"));
        }
        if edges[0] != 0.0 {
            return Err(Error::invalid("mesh must start at x = 0"));
        }
        if !edges.windows(2).all(|w| w[1] > w[0]) {
            return Err(Error::invalid("cell edges must be strictly increasing"));
        }
        let b = *edges.last().unwrap();
        let widths: Vec<f64> = edges.windows(2).map(|w| w[1] - w[0]).collect();
        let sum: f64 = widths.iter().sum();
        if (sum - b).abs() > 1e-12 * b {
            return Err(Error::invalid("cell widths do not sum to the domain length"));
        }
        let h_max = widths.iter().cloned().fold(0.0, f64::max);
        Ok(ElementMesh {
            edges,
            widths,
            h_max,
        })
    }

    /// Uniform mesh of `n` cells on `[0, b]`.
    pub fn uniform(b: f64, n: usize) -> Result<Self> {
        if !(b > 0.0) {
            return Err(Error::invalid("domain length must be positive"));
        }
        if n < 2 {
            return Err(Error::invalid("need at least 2 cells"));
        }
        let mut edges = Vec::with_capacity(n + 1);
        for j in 0..=n {
            edges.push(b * j as f64 / n as f64);
        }
        // Pin the endpoints exactly.
        edges[0] = 0.0;
        edges[n] = b;
        Self::from_edges(edges)
    }

    /// Number of cells.
    pub fn n_cells(&self) -> usize {
        self.widths.len()
    }

    /// Domain length `b`.
    pub fn domain_length(&self) -> f64 {
        *self.edges.last().unwrap()
    }

    /// Cell edges, `N + 1` of them.
    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    /// Width of cell `j` (0-based).
    pub fn width(&self, j: usize) -> f64 {
        self.widths[j]
    }

    /// Largest cell width.
    pub fn h_max(&self) -> f64 {
        self.h_max
    }

    /// Cell midpoint.
    pub fn center(&self, j: usize) -> f64 {
        0.5 * (self.edges[j] + self.edges[j + 1])
    }

    /// Map a reference coordinate to the physical point in cell `j`.
    pub fn to_physical(&self, j: usize, xi: f64) -> f64 {
        self.center(j) + 0.5 * self.widths[j] * xi
    }

    /// Cell index containing `x`, counting a shared edge to the left cell
    /// when `left_limit` is set (except at the domain ends, where the only
    /// adjacent cell is used).
    pub fn locate(&self, x: f64, left_limit: bool) -> Result<usize> {
        let b = self.domain_length();
        if !(0.0..=b).contains(&x) {
            return Err(Error::invalid(alloc::format!(
                "point {x} outside [0, {b}]"
            )));
        }
        let n = self.n_cells();
        // Binary search for the first edge >= x.
        let idx = self.edges.partition_point(|&e| e < x);
        let j = if idx == 0 {
            0
        } else if (self.edges[idx.min(n)] - x).abs() == 0.0 && idx <= n {
            // x sits exactly on edge `idx`.
            if left_limit {
                idx.saturating_sub(1).min(n - 1)
            } else {
                idx.min(n - 1)
            }
        } else {
            idx - 1
        };
        Ok(j.min(n - 1))
    }
}

/// One scalar field in the broken polynomial space: a `(k+1) x N` array of
/// coefficients, stored cell-major so each cell's modes are contiguous.
#[derive(Debug, Clone)]
pub struct CoefField {
    mesh: Arc<ElementMesh>,
    basis: Arc<BasisSet>,
    coef: Vec<f64>,
}

impl CoefField {
    /// The zero field.
    pub fn zeros(mesh: Arc<ElementMesh>, basis: Arc<BasisSet>) -> Self {
        let len = mesh.n_cells() * basis.dim();
        CoefField {
            mesh,
            basis,
            coef: vec![0.0; len],
        }
    }

    /// Wrap raw coefficients (cell-major, `N * (k+1)` entries).
    pub fn from_raw(mesh: Arc<ElementMesh>, basis: Arc<BasisSet>, coef: Vec<f64>) -> Result<Self> {
        if coef.len() != mesh.n_cells() * basis.dim() {
            return Err(Error::invalid("coefficient length does not match space"));
        }
        if !coef.iter().all(|c| c.is_finite()) {
            return Err(Error::invalid("non-finite coefficient"));
        }
        Ok(CoefField { mesh, basis, coef })
    }

    pub fn mesh(&self) -> &Arc<ElementMesh> {
        &self.mesh
    }

    pub fn basis(&self) -> &Arc<BasisSet> {
        &self.basis
    }

    /// Flat cell-major coefficients.
    pub fn raw(&self) -> &[f64] {
        &self.coef
    }

    pub fn raw_mut(&mut self) -> &mut [f64] {
        &mut self.coef
    }

    /// Coefficients of cell `j`.
    pub fn cell(&self, j: usize) -> &[f64] {
        let d = self.basis.dim();
        &self.coef[j * d..(j + 1) * d]
    }

    pub fn cell_mut(&mut self, j: usize) -> &mut [f64] {
        let d = self.basis.dim();
        &mut self.coef[j * d..(j + 1) * d]
    }

    /// Entry `(l, j)`: mode `l` of cell `j`.
    pub fn get(&self, l: usize, j: usize) -> f64 {
        self.coef[j * self.basis.dim() + l]
    }

    /// Evaluate the field at `x`. At interior cell edges the one-sided trace
    /// is selected by `side`; elsewhere `side` is irrelevant.
    pub fn eval(&self, x: f64, side: Side) -> Result<f64> {
        let j = self.mesh.locate(x, side == Side::LeftLimit)?;
        let h = self.mesh.width(j);
        let xi = (x - self.mesh.center(j)) * 2.0 / h;
        let xi = xi.clamp(-1.0, 1.0); // guard rounding at the cell edge
        let phi = self.basis.eval(xi)?;
        Ok(dot(self.cell(j), &phi))
    }

    /// Value of the cell-`j` polynomial at its own left/right endpoint.
    pub fn trace(&self, j: usize, side: Side) -> f64 {
        let phi = match side {
            Side::LeftLimit => self.basis.phi_right(), // x_{j+1/2}^- lives in cell j
            Side::RightLimit => self.basis.phi_left(),
        };
        dot(self.cell(j), phi)
    }

    /// L2 norm over `[0, b]` by quadrature.
    pub fn l2_norm(&self) -> f64 {
        libm::sqrt(self.l2_norm_sq())
    }

    /// Squared L2 norm over `[0, b]`.
    pub fn l2_norm_sq(&self) -> f64 {
        let mut acc = 0.0;
        let quad = self.basis.quad();
        for j in 0..self.mesh.n_cells() {
            let scale = 0.5 * self.mesh.width(j);
            let coef = self.cell(j);
            for (iq, &w) in quad.weights().iter().enumerate() {
                let v = dot(coef, self.basis.phi_at_quad(iq));
                acc += scale * w * v * v;
            }
        }
        acc
    }

    /// L2 distance to a reference function, by quadrature.
    pub fn l2_error(&self, mut g: impl FnMut(f64) -> f64) -> f64 {
        let mut acc = 0.0;
        let quad = self.basis.quad();
        for j in 0..self.mesh.n_cells() {
            let scale = 0.5 * self.mesh.width(j);
            let coef = self.cell(j);
            for (iq, (&xi, &w)) in quad.nodes().iter().zip(quad.weights()).enumerate() {
                let v = dot(coef, self.basis.phi_at_quad(iq));
                let d = v - g(self.mesh.to_physical(j, xi));
                acc += scale * w * d * d;
            }
        }
        libm::sqrt(acc)
    }
}

/// Which one-sided trace to take at a cell edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    LeftLimit,
    RightLimit,
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Squared L2 norm of a plain function over the mesh, by the basis quadrature.
pub fn fn_l2_norm_sq(mesh: &ElementMesh, basis: &BasisSet, mut f: impl FnMut(f64) -> f64) -> f64 {
    let quad = basis.quad();
    let mut acc = 0.0;
    for j in 0..mesh.n_cells() {
        let scale = 0.5 * mesh.width(j);
        for (&xi, &w) in quad.nodes().iter().zip(quad.weights()) {
            let v = f(mesh.to_physical(j, xi));
            acc += scale * w * v * v;
        }
    }
    acc
}

/// Per-cell mass matrices `A^j` and their inverses.
#[derive(Debug, Clone)]
pub struct MassMatrices {
    dim: usize,
    mats: Vec<f64>,
    invs: Vec<f64>,
}

impl MassMatrices {
    /// Assemble `A^j_{m,l} = integral over I_j of phi_m phi_l dx` by
    /// quadrature, and invert each cell's matrix directly.
    pub fn assemble(mesh: &ElementMesh, basis: &BasisSet) -> Result<Self> {
        let d = basis.dim();
        let n = mesh.n_cells();
        let mut mats = vec![0.0; n * d * d];
        let mut invs = vec![0.0; n * d * d];
        let gram = basis.gram();
        for j in 0..n {
            let scale = 0.5 * mesh.width(j);
            let a = &mut mats[j * d * d..(j + 1) * d * d];
            for (g, ai) in gram.iter().zip(a.iter_mut()) {
                *ai = scale * g;
            }
            let lu = Lu::factor(a, d).ok_or(Error::DegenerateBasis {
                cell: j,
                condition: f64::INFINITY,
            })?;
            if lu.pivot_ratio() > 1e12 {
                return Err(Error::DegenerateBasis {
                    cell: j,
                    condition: lu.pivot_ratio(),
                });
            }
            invs[j * d * d..(j + 1) * d * d].copy_from_slice(&lu.inverse());
        }
        Ok(MassMatrices { dim: d, mats, invs })
    }

    pub fn matrix(&self, j: usize) -> &[f64] {
        let s = self.dim * self.dim;
        &self.mats[j * s..(j + 1) * s]
    }

    pub fn inverse(&self, j: usize) -> &[f64] {
        let s = self.dim * self.dim;
        &self.invs[j * s..(j + 1) * s]
    }

    /// `out = A^{j,-1} rhs`.
    pub fn apply_inverse(&self, j: usize, rhs: &[f64], out: &mut [f64]) {
        crate::linalg::matvec(self.inverse(j), self.dim, self.dim, rhs, out);
    }
}
