//! The LDG spatial discretisation: numerical fluxes, the discrete-gradient
//! operator, the flux-variable projection, the coefficient-space BSDE
//! generator, and terminal coefficient assembly.
//!
//! All operators act on flat cell-major coefficient vectors; the
//! [`crate::mesh::CoefField`] wrappers validate shapes and are the public
//! entry points. The generator also exposes the transpose of its Jacobian
//! (`generator_vjp`), which the training loop needs for exact reverse-mode
//! gradients.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::basis::BasisSet;
use crate::mesh::{dot, CoefField, ElementMesh, MassMatrices};
use crate::projection::project_l2;
use crate::{Error, Result};

/// Problem coefficients and the nonlinear driver.
///
/// The stochastic argument `w` is the current value of the Brownian motion;
/// path-dependent coefficients are not supported. Spatial derivatives of
/// `sigma` and `sigma_bar` are supplied analytically because they enter the
/// drift shorthands `lambda` and `mu` exactly.
pub trait Coefficients: Send + Sync {
    fn sigma(&self, x: f64, t: f64, w: f64) -> f64;
    fn sigma_bar(&self, x: f64, t: f64, w: f64) -> f64;
    fn sigma_x(&self, x: f64, t: f64, w: f64) -> f64;
    fn sigma_bar_x(&self, x: f64, t: f64, w: f64) -> f64;

    /// Nonlinear driver `Gamma(x, t, w, u, v, psi)`.
    fn gamma(&self, x: f64, t: f64, w: f64, u: f64, v: f64, psi: f64) -> f64;

    /// Exact partial derivatives of `gamma` with respect to `(u, v, psi)`.
    fn gamma_partials(
        &self,
        x: f64,
        t: f64,
        w: f64,
        u: f64,
        v: f64,
        psi: f64,
    ) -> (f64, f64, f64);

    /// Terminal datum `G(x, w_T)`.
    fn terminal(&self, x: f64, w: f64) -> f64;

    /// Ellipticity floor `kappa` with `sigma_bar^2 >= kappa > 0`.
    fn ellipticity_floor(&self) -> f64;

    /// Essential bound `K` on `sigma`, `sigma_bar` and their derivatives.
    fn coefficient_bound(&self) -> f64;

    /// Global Lipschitz constant of the driver, when one exists.
    fn driver_lipschitz(&self) -> Option<f64>;

    /// Drift shorthand `lambda = -sigma sigma_x - sigma_bar sigma_bar_x`.
    fn lambda(&self, x: f64, t: f64, w: f64) -> f64 {
        -self.sigma(x, t, w) * self.sigma_x(x, t, w)
            - self.sigma_bar(x, t, w) * self.sigma_bar_x(x, t, w)
    }

    /// Drift shorthand `mu = -sigma_x`.
    fn mu(&self, x: f64, t: f64, w: f64) -> f64 {
        -self.sigma_x(x, t, w)
    }
}

/// Which one-sided traces the numerical fluxes take at interior edges.
///
/// Both pairings are skew-adjoint in the discrete sense; the boundary fluxes
/// (interior trace for `u`, zero for `p`) are shared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FluxVariant {
    /// `u_hat = u^-`, `p_hat = p^+` (the default pairing).
    #[default]
    UMinusPPlus,
    /// `u_hat = u^+`, `p_hat = p^-` (the mirrored pairing).
    UPlusPMinus,
}

/// A cell endpoint, used to address one-sided traces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum End {
    Left,
    Right,
}

/// Factored `I - dt A` with `A` the u-linear generator part; maps network
/// outputs (or fitted regression rows) to stable one-step values.
pub struct ImplicitShift {
    lu: crate::linalg::Lu,
    dof: usize,
}

impl ImplicitShift {
    /// `x <- (I - dt A)^{-1} x`.
    pub fn solve_in_place(&self, x: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dof);
        self.lu.solve_in_place(x);
    }

    /// `x <- (I - dt A)^{-T} x` (for gradient pullback).
    pub fn solve_transpose_in_place(&self, x: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dof);
        self.lu.solve_transpose_in_place(x);
    }

    pub fn dof(&self) -> usize {
        self.dof
    }
}

/// Scratch buffers for generator evaluation, reused across calls.
#[derive(Debug, Default, Clone)]
pub struct LdgWorkspace {
    v: Vec<f64>,
    p: Vec<f64>,
    rhs: Vec<f64>,
    edge: Vec<f64>,
    // vjp-only scratch
    cv: Vec<f64>,
    cp: Vec<f64>,
}

/// The assembled LDG spatial operator on one mesh/basis pair.
pub struct LdgOperator {
    mesh: Arc<ElementMesh>,
    basis: Arc<BasisSet>,
    mass: MassMatrices,
    coef: Arc<dyn Coefficients>,
    flux: FluxVariant,
    /// Reference convection matrix `C[n*d+m] = sum_q w_q phi_n(xi_q) phi_m'(xi_q)`.
    conv: Vec<f64>,
    /// Physical quadrature points, cell-major `x[j*q + iq]`.
    xq: Vec<f64>,
}

impl LdgOperator {
    pub fn new(
        mesh: Arc<ElementMesh>,
        basis: Arc<BasisSet>,
        coef: Arc<dyn Coefficients>,
        flux: FluxVariant,
    ) -> Result<Self> {
        let mass = MassMatrices::assemble(&mesh, &basis)?;
        let d = basis.dim();
        let q = basis.quad().order();
        let mut conv = vec![0.0; d * d];
        for (iq, &w) in basis.quad().weights().iter().enumerate() {
            let phi = basis.phi_at_quad(iq);
            let dphi = basis.dphi_at_quad(iq);
            for n in 0..d {
                for m in 0..d {
                    conv[n * d + m] += w * phi[n] * dphi[m];
                }
            }
        }
        let mut xq = vec![0.0; mesh.n_cells() * q];
        for j in 0..mesh.n_cells() {
            for (iq, &xi) in basis.quad().nodes().iter().enumerate() {
                xq[j * q + iq] = mesh.to_physical(j, xi);
            }
        }
        Ok(LdgOperator {
            mesh,
            basis,
            mass,
            coef,
            flux,
            conv,
            xq,
        })
    }

    pub fn mesh(&self) -> &Arc<ElementMesh> {
        &self.mesh
    }

    pub fn basis(&self) -> &Arc<BasisSet> {
        &self.basis
    }

    pub fn coefficients(&self) -> &Arc<dyn Coefficients> {
        &self.coef
    }

    pub fn flux_variant(&self) -> FluxVariant {
        self.flux
    }

    pub fn mass(&self) -> &MassMatrices {
        &self.mass
    }

    /// Degrees of freedom of one field, `N (k+1)`.
    pub fn dof(&self) -> usize {
        self.mesh.n_cells() * self.basis.dim()
    }

    /// Squared L2 function norm of a raw coefficient vector, `sum_j c_j^T A^j c_j`.
    pub fn l2_norm_sq_coef(&self, coef: &[f64]) -> f64 {
        let d = self.basis.dim();
        let mut acc = 0.0;
        for j in 0..self.mesh.n_cells() {
            let a = self.mass.matrix(j);
            let c = &coef[j * d..(j + 1) * d];
            for m in 0..d {
                let mut s = 0.0;
                for l in 0..d {
                    s += a[m * d + l] * c[l];
                }
                acc += c[m] * s;
            }
        }
        acc
    }

    pub fn make_workspace(&self) -> LdgWorkspace {
        let dof = self.dof();
        let d = self.basis.dim();
        let n_edges = self.mesh.n_cells() + 1;
        LdgWorkspace {
            v: vec![0.0; dof],
            p: vec![0.0; dof],
            rhs: vec![0.0; d],
            edge: vec![0.0; n_edges],
            cv: vec![0.0; dof],
            cp: vec![0.0; dof],
        }
    }

    fn check_shape(&self, f: &CoefField) -> Result<()> {
        if f.mesh().n_cells() != self.mesh.n_cells() || f.basis().dim() != self.basis.dim() {
            return Err(Error::invalid("field shape does not match operator"));
        }
        Ok(())
    }

    fn zeros(&self) -> CoefField {
        CoefField::zeros(self.mesh.clone(), self.basis.clone())
    }

    /// Trace of cell `j` of a raw coefficient vector at one of its endpoints.
    fn cell_trace(&self, f: &[f64], j: usize, end: End) -> f64 {
        let d = self.basis.dim();
        let phi = match end {
            End::Left => self.basis.phi_left(),
            End::Right => self.basis.phi_right(),
        };
        dot(&f[j * d..(j + 1) * d], phi)
    }

    /// Source of the `u` flux at edge `e` (0..=N): cell index and endpoint.
    fn u_hat_src(&self, e: usize) -> (usize, End) {
        let n = self.mesh.n_cells();
        if e == 0 {
            (0, End::Left)
        } else if e == n {
            (n - 1, End::Right)
        } else {
            match self.flux {
                FluxVariant::UMinusPPlus => (e - 1, End::Right),
                FluxVariant::UPlusPMinus => (e, End::Left),
            }
        }
    }

    /// Source of the `p` flux at edge `e`, `None` at the Neumann boundary
    /// where `p_hat = 0`.
    fn p_hat_src(&self, e: usize) -> Option<(usize, End)> {
        let n = self.mesh.n_cells();
        if e == 0 || e == n {
            None
        } else {
            Some(match self.flux {
                FluxVariant::UMinusPPlus => (e, End::Left),
                FluxVariant::UPlusPMinus => (e - 1, End::Right),
            })
        }
    }

    /// Discrete gradient: `v = V u` in raw coefficient space.
    pub fn gradient_into(&self, u: &[f64], v: &mut [f64], ws: &mut LdgWorkspace) {
        let n = self.mesh.n_cells();
        let d = self.basis.dim();
        debug_assert_eq!(u.len(), n * d);
        debug_assert_eq!(v.len(), n * d);
        for e in 0..=n {
            let (j, end) = self.u_hat_src(e);
            ws.edge[e] = self.cell_trace(u, j, end);
        }
        let phi_l = self.basis.phi_left();
        let phi_r = self.basis.phi_right();
        for j in 0..n {
            let uc = &u[j * d..(j + 1) * d];
            let rhs = &mut ws.rhs;
            for m in 0..d {
                // Volume term: -sum_q w_q u_h(xi_q) phi_m'(xi_q); the h
                // factors cancel against the physical derivative.
                let mut s = 0.0;
                for nmode in 0..d {
                    s += uc[nmode] * self.conv[nmode * d + m];
                }
                rhs[m] = -s + ws.edge[j + 1] * phi_r[m] - ws.edge[j] * phi_l[m];
            }
            self.mass.apply_inverse(j, rhs, &mut v[j * d..(j + 1) * d]);
        }
    }

    /// Flux variable: cellwise projection of
    /// `(sigma^2 + sigma_bar^2)/2 v + sigma psi`.
    pub fn flux_into(
        &self,
        t: f64,
        w: f64,
        v: &[f64],
        psi: &[f64],
        p: &mut [f64],
        ws: &mut LdgWorkspace,
    ) {
        let n = self.mesh.n_cells();
        let d = self.basis.dim();
        let quad = self.basis.quad();
        let q = quad.order();
        for j in 0..n {
            let scale = 0.5 * self.mesh.width(j);
            let vc = &v[j * d..(j + 1) * d];
            let pc = &psi[j * d..(j + 1) * d];
            let rhs = &mut ws.rhs;
            rhs.iter_mut().for_each(|r| *r = 0.0);
            for (iq, &wq) in quad.weights().iter().enumerate() {
                let x = self.xq[j * q + iq];
                let phi = self.basis.phi_at_quad(iq);
                let sig = self.coef.sigma(x, t, w);
                let sigb = self.coef.sigma_bar(x, t, w);
                let vh = dot(vc, phi);
                let ph = dot(pc, phi);
                let integrand = 0.5 * (sig * sig + sigb * sigb) * vh + sig * ph;
                let c = scale * wq * integrand;
                for m in 0..d {
                    rhs[m] += c * phi[m];
                }
            }
            self.mass.apply_inverse(j, rhs, &mut p[j * d..(j + 1) * d]);
        }
    }

    /// The BSDE generator `F_h(t, u, psi)` in raw coefficient space.
    pub fn generator_into(
        &self,
        t: f64,
        w: f64,
        u: &[f64],
        psi: &[f64],
        out: &mut [f64],
        ws: &mut LdgWorkspace,
    ) -> Result<()> {
        self.generator_into_impl(t, w, u, psi, out, ws, true)
    }

    /// Factor `I - dt A` where `A` is the u-linear part of the generator at
    /// the reference state `w = 0`. Both backward engines lean on this: the
    /// explicit image of that part has spectral radius ~ `1/h^2` and cannot
    /// be iterated on the benchmark grids.
    pub fn implicit_factor(&self, t: f64, dt: f64) -> Result<ImplicitShift> {
        let dof = self.dof();
        let a = self.generator_linear_matrix(t, 0.0);
        let mut shifted = a;
        for r in 0..dof {
            for c in 0..dof {
                let v = -dt * shifted[r * dof + c];
                shifted[r * dof + c] = if r == c { 1.0 + v } else { v };
            }
        }
        let lu = crate::linalg::Lu::factor(&shifted, dof).ok_or(Error::DegenerateBasis {
            cell: 0,
            condition: f64::INFINITY,
        })?;
        Ok(ImplicitShift { lu, dof })
    }

    /// Dense matrix of the u-linear part of the generator (the flux,
    /// auxiliary-variable and `lambda` terms, driver excluded), column by
    /// column. This is the stiff part that implicit time-stepping needs.
    pub fn generator_linear_matrix(&self, t: f64, w: f64) -> Vec<f64> {
        let dof = self.dof();
        let mut ws = self.make_workspace();
        let mut unit = vec![0.0; dof];
        let zero = vec![0.0; dof];
        let mut col = vec![0.0; dof];
        let mut mat = vec![0.0; dof * dof];
        for q in 0..dof {
            unit[q] = 1.0;
            self.generator_into_impl(t, w, &unit, &zero, &mut col, &mut ws, false)
                .expect("linear part cannot fail");
            unit[q] = 0.0;
            for r in 0..dof {
                mat[r * dof + q] = col[r];
            }
        }
        mat
    }

    #[allow(clippy::too_many_arguments)]
    fn generator_into_impl(
        &self,
        t: f64,
        w: f64,
        u: &[f64],
        psi: &[f64],
        out: &mut [f64],
        ws: &mut LdgWorkspace,
        include_gamma: bool,
    ) -> Result<()> {
        let n = self.mesh.n_cells();
        let d = self.basis.dim();
        let quad = self.basis.quad();
        let q = quad.order();

        let mut v = core::mem::take(&mut ws.v);
        let mut p = core::mem::take(&mut ws.p);
        self.gradient_into(u, &mut v, ws);
        self.flux_into(t, w, &v, psi, &mut p, ws);

        for e in 0..=n {
            ws.edge[e] = match self.p_hat_src(e) {
                None => 0.0,
                Some((j, end)) => self.cell_trace(&p, j, end),
            };
        }
        let phi_l = self.basis.phi_left();
        let phi_r = self.basis.phi_right();
        let mut status = Ok(());
        for j in 0..n {
            let scale = 0.5 * self.mesh.width(j);
            let uc = &u[j * d..(j + 1) * d];
            let vc = &v[j * d..(j + 1) * d];
            let pc = &p[j * d..(j + 1) * d];
            let psic = &psi[j * d..(j + 1) * d];
            let rhs = &mut ws.rhs;
            for m in 0..d {
                let mut s = 0.0;
                for nmode in 0..d {
                    s += pc[nmode] * self.conv[nmode * d + m];
                }
                rhs[m] = -s + ws.edge[j + 1] * phi_r[m] - ws.edge[j] * phi_l[m];
            }
            for (iq, &wq) in quad.weights().iter().enumerate() {
                let x = self.xq[j * q + iq];
                let phi = self.basis.phi_at_quad(iq);
                let uh = dot(uc, phi);
                let vh = dot(vc, phi);
                let psih = dot(psic, phi);
                let lam = self.coef.lambda(x, t, w);
                let mu = self.coef.mu(x, t, w);
                let gam = if include_gamma {
                    let g = self.coef.gamma(x, t, w, uh, vh, psih);
                    if !g.is_finite() {
                        status = Err(Error::DriverEvaluation {
                            x,
                            t,
                            w,
                            u: uh,
                            v: vh,
                            psi: psih,
                        });
                    }
                    g
                } else {
                    0.0
                };
                let c = scale * wq * (lam * vh + mu * psih + gam);
                for m in 0..d {
                    rhs[m] += c * phi[m];
                }
            }
            self.mass.apply_inverse(j, rhs, &mut out[j * d..(j + 1) * d]);
        }
        ws.v = v;
        ws.p = p;
        status
    }

    /// Vector-Jacobian product of the generator: given a cotangent `cot`,
    /// accumulate `d(cot . F)/du` into `grad_u` and `d(cot . F)/dpsi` into
    /// `grad_psi`. Uses the same forward pass as [`Self::generator_into`]
    /// and the exact driver partials.
    #[allow(clippy::too_many_arguments)]
    pub fn generator_vjp(
        &self,
        t: f64,
        w: f64,
        u: &[f64],
        psi: &[f64],
        cot: &[f64],
        grad_u: &mut [f64],
        grad_psi: &mut [f64],
        ws: &mut LdgWorkspace,
    ) {
        let n = self.mesh.n_cells();
        let d = self.basis.dim();
        let quad = self.basis.quad();
        let q = quad.order();
        let phi_l = self.basis.phi_left();
        let phi_r = self.basis.phi_right();

        let mut v = core::mem::take(&mut ws.v);
        let mut cv = core::mem::take(&mut ws.cv);
        let mut cp = core::mem::take(&mut ws.cp);
        self.gradient_into(u, &mut v, ws);

        grad_u.iter_mut().for_each(|g| *g = 0.0);
        grad_psi.iter_mut().for_each(|g| *g = 0.0);
        cv.iter_mut().for_each(|g| *g = 0.0);
        cp.iter_mut().for_each(|g| *g = 0.0);

        // Stage 1: pull the cotangent back through F's assembly. For each
        // cell, chat = A^{j,-1} cot_j (mass inverses are symmetric).
        for j in 0..n {
            let scale = 0.5 * self.mesh.width(j);
            let chat = &mut ws.rhs;
            self.mass.apply_inverse(j, &cot[j * d..(j + 1) * d], chat);

            // Volume term in p: -sum_q w_q p_h phi_m' -> cp.
            let cpj = &mut cp[j * d..(j + 1) * d];
            for nmode in 0..d {
                let mut s = 0.0;
                for m in 0..d {
                    s += self.conv[nmode * d + m] * chat[m];
                }
                cpj[nmode] -= s;
            }
            // Edge terms in p.
            if let Some((src, end)) = self.p_hat_src(j + 1) {
                let weight = dot(chat, phi_r);
                let phi_src = match end {
                    End::Left => phi_l,
                    End::Right => phi_r,
                };
                for nmode in 0..d {
                    cp[src * d + nmode] += weight * phi_src[nmode];
                }
            }
            if let Some((src, end)) = self.p_hat_src(j) {
                let weight = dot(chat, phi_l);
                let phi_src = match end {
                    End::Left => phi_l,
                    End::Right => phi_r,
                };
                for nmode in 0..d {
                    cp[src * d + nmode] -= weight * phi_src[nmode];
                }
            }

            // Pointwise terms: lambda v + mu psi + Gamma(u, v, psi).
            let uc = &u[j * d..(j + 1) * d];
            let vc = &v[j * d..(j + 1) * d];
            let psic = &psi[j * d..(j + 1) * d];
            for (iq, &wq) in quad.weights().iter().enumerate() {
                let x = self.xq[j * q + iq];
                let phi = self.basis.phi_at_quad(iq);
                let chat_phi = dot(chat, phi);
                let uh = dot(uc, phi);
                let vh = dot(vc, phi);
                let psih = dot(psic, phi);
                let lam = self.coef.lambda(x, t, w);
                let mu = self.coef.mu(x, t, w);
                let (gu, gv, gpsi) = self.coef.gamma_partials(x, t, w, uh, vh, psih);
                let base = scale * wq * chat_phi;
                let cu_pt = base * gu;
                let cv_pt = base * (lam + gv);
                let cpsi_pt = base * (mu + gpsi);
                for nmode in 0..d {
                    grad_u[j * d + nmode] += cu_pt * phi[nmode];
                    cv[j * d + nmode] += cv_pt * phi[nmode];
                    grad_psi[j * d + nmode] += cpsi_pt * phi[nmode];
                }
            }
        }

        // Stage 2: pull cp back through P into (cv, grad_psi).
        for j in 0..n {
            let scale = 0.5 * self.mesh.width(j);
            let shat = &mut ws.rhs;
            self.mass.apply_inverse(j, &cp[j * d..(j + 1) * d], shat);
            for (iq, &wq) in quad.weights().iter().enumerate() {
                let x = self.xq[j * q + iq];
                let phi = self.basis.phi_at_quad(iq);
                let shat_phi = dot(shat, phi);
                let sig = self.coef.sigma(x, t, w);
                let sigb = self.coef.sigma_bar(x, t, w);
                let base = scale * wq * shat_phi;
                let cv_pt = base * 0.5 * (sig * sig + sigb * sigb);
                let cpsi_pt = base * sig;
                for nmode in 0..d {
                    cv[j * d + nmode] += cv_pt * phi[nmode];
                    grad_psi[j * d + nmode] += cpsi_pt * phi[nmode];
                }
            }
        }

        // Stage 3: pull cv back through V into grad_u.
        for j in 0..n {
            let ghat = &mut ws.rhs;
            self.mass.apply_inverse(j, &cv[j * d..(j + 1) * d], ghat);
            for nmode in 0..d {
                let mut s = 0.0;
                for m in 0..d {
                    s += self.conv[nmode * d + m] * ghat[m];
                }
                grad_u[j * d + nmode] -= s;
            }
            // u_hat edge pulls.
            let (src_r, end_r) = self.u_hat_src(j + 1);
            let weight_r = dot(ghat, phi_r);
            let phi_src = match end_r {
                End::Left => phi_l,
                End::Right => phi_r,
            };
            for nmode in 0..d {
                grad_u[src_r * d + nmode] += weight_r * phi_src[nmode];
            }
            let (src_l, end_l) = self.u_hat_src(j);
            let weight_l = dot(ghat, phi_l);
            let phi_src = match end_l {
                End::Left => phi_l,
                End::Right => phi_r,
            };
            for nmode in 0..d {
                grad_u[src_l * d + nmode] -= weight_l * phi_src[nmode];
            }
        }

        ws.v = v;
        ws.cv = cv;
        ws.cp = cp;
    }

    /// `v = V u` on fields (the auxiliary-variable operator).
    pub fn discrete_gradient(&self, u: &CoefField) -> Result<CoefField> {
        self.check_shape(u)?;
        let mut ws = self.make_workspace();
        let mut out = self.zeros();
        self.gradient_into(u.raw(), out.raw_mut(), &mut ws);
        Ok(out)
    }

    /// `p = P(t, w, v, psi)` on fields (the flux-variable operator).
    pub fn flux_field(&self, t: f64, w: f64, v: &CoefField, psi: &CoefField) -> Result<CoefField> {
        self.check_shape(v)?;
        self.check_shape(psi)?;
        let mut ws = self.make_workspace();
        let mut out = self.zeros();
        self.flux_into(t, w, v.raw(), psi.raw(), out.raw_mut(), &mut ws);
        Ok(out)
    }

    /// `F_h(t, u, psi)` on fields (the BSDE generator).
    pub fn generator(&self, t: f64, w: f64, u: &CoefField, psi: &CoefField) -> Result<CoefField> {
        self.check_shape(u)?;
        self.check_shape(psi)?;
        let mut ws = self.make_workspace();
        let mut out = self.zeros();
        self.generator_into(t, w, u.raw(), psi.raw(), out.raw_mut(), &mut ws)?;
        Ok(out)
    }

    /// Terminal coefficients: the L2 projection of `G(., w_T)`.
    pub fn terminal_coefficients(&self, w_terminal: f64) -> CoefField {
        let coef = self.coef.clone();
        project_l2(
            move |x| coef.terminal(x, w_terminal),
            &self.mesh,
            &self.basis,
        )
    }

    /// Terminal coefficients written into a raw vector.
    pub fn terminal_into(&self, w_terminal: f64, out: &mut [f64]) {
        let f = self.terminal_coefficients(w_terminal);
        out.copy_from_slice(f.raw());
    }

    /// The summed flux cross terms whose telescoping underlies stability;
    /// identically zero up to rounding for both flux variants.
    pub fn flux_pairing_sum(&self, u: &CoefField, p: &CoefField) -> Result<f64> {
        self.check_shape(u)?;
        self.check_shape(p)?;
        let n = self.mesh.n_cells();
        let d = self.basis.dim();
        let quad = self.basis.quad();
        let ur = u.raw();
        let pr = p.raw();
        let mut u_hat = vec![0.0; n + 1];
        let mut p_hat = vec![0.0; n + 1];
        for e in 0..=n {
            let (j, end) = self.u_hat_src(e);
            u_hat[e] = self.cell_trace(ur, j, end);
            p_hat[e] = match self.p_hat_src(e) {
                None => 0.0,
                Some((j, end)) => self.cell_trace(pr, j, end),
            };
        }
        let mut sum = 0.0;
        for j in 0..n {
            let uc = &ur[j * d..(j + 1) * d];
            let pc = &pr[j * d..(j + 1) * d];
            // -int_{I_j} (p u_x + u p_x) dx, h-free in reference variables.
            for (iq, &wq) in quad.weights().iter().enumerate() {
                let phi = self.basis.phi_at_quad(iq);
                let dphi = self.basis.dphi_at_quad(iq);
                let uh = dot(uc, phi);
                let ph = dot(pc, phi);
                let duh = dot(uc, dphi);
                let dph = dot(pc, dphi);
                sum -= wq * (ph * duh + uh * dph);
            }
            let u_minus = self.cell_trace(ur, j, End::Right);
            let u_plus = self.cell_trace(ur, j, End::Left);
            let p_minus = self.cell_trace(pr, j, End::Right);
            let p_plus = self.cell_trace(pr, j, End::Left);
            sum += p_hat[j + 1] * u_minus - p_hat[j] * u_plus;
            sum += u_hat[j + 1] * p_minus - u_hat[j] * p_plus;
        }
        Ok(sum)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisKind;
    use crate::mesh::Side;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    const TAU: f64 = core::f64::consts::TAU;

    /// Minimal test coefficients: constant diffusions, configurable driver.
    struct TestCoef {
        sigma: fn(f64) -> f64,
        sigma_x: fn(f64) -> f64,
        sigma_bar: f64,
        gamma_kind: GammaKind,
    }

    enum GammaKind {
        Zero,
        /// `c u` with constant `c`.
        LinearU(f64),
        /// Softplus driver as in the Lipschitz benchmark: `ln(1 + e^v)`.
        Softplus,
    }

    impl Coefficients for TestCoef {
        fn sigma(&self, x: f64, _t: f64, _w: f64) -> f64 {
            (self.sigma)(x)
        }
        fn sigma_bar(&self, _x: f64, _t: f64, _w: f64) -> f64 {
            self.sigma_bar
        }
        fn sigma_x(&self, x: f64, _t: f64, _w: f64) -> f64 {
            (self.sigma_x)(x)
        }
        fn sigma_bar_x(&self, _x: f64, _t: f64, _w: f64) -> f64 {
            0.0
        }
        fn gamma(&self, _x: f64, _t: f64, _w: f64, u: f64, v: f64, _psi: f64) -> f64 {
            match self.gamma_kind {
                GammaKind::Zero => 0.0,
                GammaKind::LinearU(c) => c * u,
                GammaKind::Softplus => libm::log(1.0 + libm::exp(v)),
            }
        }
        fn gamma_partials(
            &self,
            _x: f64,
            _t: f64,
            _w: f64,
            _u: f64,
            v: f64,
            _psi: f64,
        ) -> (f64, f64, f64) {
            match self.gamma_kind {
                GammaKind::Zero => (0.0, 0.0, 0.0),
                GammaKind::LinearU(c) => (c, 0.0, 0.0),
                GammaKind::Softplus => (0.0, 1.0 / (1.0 + libm::exp(-v)), 0.0),
            }
        }
        fn terminal(&self, x: f64, w: f64) -> f64 {
            libm::cos(x) * libm::cos(w)
        }
        fn ellipticity_floor(&self) -> f64 {
            self.sigma_bar * self.sigma_bar
        }
        fn coefficient_bound(&self) -> f64 {
            1.0f64.max(self.sigma_bar)
        }
        fn driver_lipschitz(&self) -> Option<f64> {
            Some(1.0)
        }
    }

    fn sin_coef(gamma_kind: GammaKind) -> Arc<dyn Coefficients> {
        Arc::new(TestCoef {
            sigma: libm::sin,
            sigma_x: libm::cos,
            sigma_bar: 1.0,
            gamma_kind,
        })
    }

    fn operator(
        b: f64,
        n: usize,
        k: usize,
        kind: BasisKind,
        coef: Arc<dyn Coefficients>,
        flux: FluxVariant,
    ) -> LdgOperator {
        let mesh = Arc::new(ElementMesh::uniform(b, n).unwrap());
        let basis = Arc::new(BasisSet::with_default_quad(kind, k).unwrap());
        LdgOperator::new(mesh, basis, coef, flux).unwrap()
    }

    fn random_field(op: &LdgOperator, rng: &mut ChaCha12Rng) -> CoefField {
        let mut f = CoefField::zeros(op.mesh().clone(), op.basis().clone());
        for c in f.raw_mut() {
            *c = rng.gen_range(-1.0..1.0);
        }
        f
    }

    #[test]
    fn gradient_of_constant_vanishes() {
        for flux in [FluxVariant::UMinusPPlus, FluxVariant::UPlusPMinus] {
            let op = operator(1.0, 4, 2, BasisKind::Legendre, sin_coef(GammaKind::Zero), flux);
            let mut u = CoefField::zeros(op.mesh().clone(), op.basis().clone());
            for j in 0..4 {
                u.cell_mut(j)[0] = 5.0;
            }
            let v = op.discrete_gradient(&u).unwrap();
            assert!(v.raw().iter().all(|c| c.abs() < 1e-12));
        }
    }

    #[test]
    fn gradient_of_global_linear_is_its_slope() {
        // Hand evaluation of the weak form on one interior cell: with exact
        // traces of a continuous piecewise polynomial the flux terms restore
        // integration by parts, so V reproduces the derivative.
        let op = operator(
            1.0,
            4,
            2,
            BasisKind::Legendre,
            sin_coef(GammaKind::Zero),
            FluxVariant::UMinusPPlus,
        );
        let alpha = 2.5;
        let u = project_l2(|x| alpha * x - 0.7, op.mesh(), op.basis());
        let v = op.discrete_gradient(&u).unwrap();
        for j in 0..4 {
            assert!((v.get(0, j) - alpha).abs() < 1e-10, "cell {j}");
            for l in 1..3 {
                assert!(v.get(l, j).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gradient_converges_to_continuous_derivative() {
        let k = 2;
        let mut errs = alloc::vec::Vec::new();
        for n in [8usize, 16, 32] {
            let op = operator(
                TAU,
                n,
                k,
                BasisKind::Legendre,
                sin_coef(GammaKind::Zero),
                FluxVariant::UMinusPPlus,
            );
            let u = crate::projection::project_gr_minus(libm::cos, op.mesh(), op.basis()).unwrap();
            let v = op.discrete_gradient(&u).unwrap();
            errs.push(v.l2_error(|x| -libm::sin(x)));
        }
        for wpair in errs.windows(2) {
            let order = (wpair[0] / wpair[1]).log2();
            assert!(order >= k as f64, "observed order {order}");
        }
    }

    #[test]
    fn flux_field_reduces_to_identity_for_unit_coefficients() {
        // sigma = 0, sigma_bar = sqrt(2): (sigma^2 + sigma_bar^2)/2 = 1.
        let coef: Arc<dyn Coefficients> = Arc::new(TestCoef {
            sigma: |_| 0.0,
            sigma_x: |_| 0.0,
            sigma_bar: core::f64::consts::SQRT_2,
            gamma_kind: GammaKind::Zero,
        });
        let op = operator(1.0, 3, 2, BasisKind::Legendre, coef, FluxVariant::UMinusPPlus);
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let v = random_field(&op, &mut rng);
        let psi = random_field(&op, &mut rng);
        let p = op.flux_field(0.0, 0.0, &v, &psi).unwrap();
        for (a, b) in p.raw().iter().zip(v.raw()) {
            assert!((a - b).abs() <= 1e-11);
        }
    }

    #[test]
    fn flux_field_zero_inputs_give_zero() {
        let op = operator(
            TAU,
            4,
            2,
            BasisKind::Legendre,
            sin_coef(GammaKind::Zero),
            FluxVariant::UMinusPPlus,
        );
        let z = CoefField::zeros(op.mesh().clone(), op.basis().clone());
        let p = op.flux_field(0.3, 0.1, &z, &z).unwrap();
        assert!(p.raw().iter().all(|c| c.abs() == 0.0));
    }

    #[test]
    fn flux_field_matches_direct_quadrature() {
        // Example-1 style coefficients at (t, w) = (0, 0), compared against
        // the closed-form integrand projected cellwise.
        let t_h = 0.5f64;
        let e = libm::exp(-0.5 * t_h);
        let op = operator(
            TAU,
            6,
            2,
            BasisKind::Legendre,
            sin_coef(GammaKind::Zero),
            FluxVariant::UMinusPPlus,
        );
        let v = crate::projection::project_gr_plus(|x| -libm::sin(x) * e, op.mesh(), op.basis())
            .unwrap();
        let psi = crate::projection::project_gr_minus(|_| 0.0, op.mesh(), op.basis()).unwrap();
        let p = op.flux_field(0.0, 0.0, &v, &psi).unwrap();
        // Direct projection of (sin^2 x + 1)/2 * v_h(x), with v_h evaluated
        // through the field itself.
        let direct = project_l2(
            |x| {
                let s = libm::sin(x);
                0.5 * (s * s + 1.0) * v.eval(x, Side::LeftLimit).unwrap()
            },
            op.mesh(),
            op.basis(),
        );
        for (a, b) in p.raw().iter().zip(direct.raw()) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn generator_vanishes_on_constants_with_zero_driver() {
        for flux in [FluxVariant::UMinusPPlus, FluxVariant::UPlusPMinus] {
            let op = operator(TAU, 5, 2, BasisKind::Legendre, sin_coef(GammaKind::Zero), flux);
            let mut u = CoefField::zeros(op.mesh().clone(), op.basis().clone());
            for j in 0..5 {
                u.cell_mut(j)[0] = -1.3;
            }
            let psi = CoefField::zeros(op.mesh().clone(), op.basis().clone());
            let f = op.generator(0.1, 0.2, &u, &psi).unwrap();
            assert!(f.raw().iter().all(|c| c.abs() < 1e-11));
        }
    }

    #[test]
    fn generator_is_linear_when_driver_is_linear() {
        let op = operator(
            TAU,
            4,
            2,
            BasisKind::Legendre,
            sin_coef(GammaKind::LinearU(0.8)),
            FluxVariant::UMinusPPlus,
        );
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let u1 = random_field(&op, &mut rng);
        let u2 = random_field(&op, &mut rng);
        let s1 = random_field(&op, &mut rng);
        let s2 = random_field(&op, &mut rng);
        let mut u_sum = u1.clone();
        for (a, b) in u_sum.raw_mut().iter_mut().zip(u2.raw()) {
            *a += b;
        }
        let mut s_sum = s1.clone();
        for (a, b) in s_sum.raw_mut().iter_mut().zip(s2.raw()) {
            *a += b;
        }
        let f1 = op.generator(0.2, 0.5, &u1, &s1).unwrap();
        let f2 = op.generator(0.2, 0.5, &u2, &s2).unwrap();
        let f_sum = op.generator(0.2, 0.5, &u_sum, &s_sum).unwrap();
        for ((a, b), c) in f1.raw().iter().zip(f2.raw()).zip(f_sum.raw()) {
            assert!((a + b - c).abs() <= 1e-10);
        }
    }

    #[test]
    fn generator_point_values_agree_across_bases() {
        let coef = sin_coef(GammaKind::Softplus);
        let make = |kind| {
            operator(TAU, 5, 3, kind, coef.clone(), FluxVariant::UMinusPPlus)
        };
        let op_leg = make(BasisKind::Legendre);
        let op_lag = make(BasisKind::Lagrange);
        let u_fn = |x: f64| libm::cos(x) * 0.7;
        let psi_fn = |x: f64| libm::sin(2.0 * x) * 0.3;
        let f_leg = {
            let u = project_l2(u_fn, op_leg.mesh(), op_leg.basis());
            let psi = project_l2(psi_fn, op_leg.mesh(), op_leg.basis());
            op_leg.generator(0.1, -0.4, &u, &psi).unwrap()
        };
        let f_lag = {
            let u = project_l2(u_fn, op_lag.mesh(), op_lag.basis());
            let psi = project_l2(psi_fn, op_lag.mesh(), op_lag.basis());
            op_lag.generator(0.1, -0.4, &u, &psi).unwrap()
        };
        let quad = op_leg.basis().quad().clone();
        for j in 0..5 {
            for &xi in quad.nodes() {
                let x = op_leg.mesh().to_physical(j, xi);
                let a = f_leg.eval(x, Side::LeftLimit).unwrap();
                let b = f_lag.eval(x, Side::LeftLimit).unwrap();
                assert!((a - b).abs() <= 1e-9, "x={x}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn generator_reports_driver_blowup() {
        struct BadDriver;
        impl Coefficients for BadDriver {
            fn sigma(&self, _: f64, _: f64, _: f64) -> f64 {
                0.0
            }
            fn sigma_bar(&self, _: f64, _: f64, _: f64) -> f64 {
                1.0
            }
            fn sigma_x(&self, _: f64, _: f64, _: f64) -> f64 {
                0.0
            }
            fn sigma_bar_x(&self, _: f64, _: f64, _: f64) -> f64 {
                0.0
            }
            fn gamma(&self, _: f64, _: f64, _: f64, u: f64, _: f64, _: f64) -> f64 {
                1.0 / (u - u) // NaN for every input
            }
            fn gamma_partials(
                &self,
                _: f64,
                _: f64,
                _: f64,
                _: f64,
                _: f64,
                _: f64,
            ) -> (f64, f64, f64) {
                (0.0, 0.0, 0.0)
            }
            fn terminal(&self, _: f64, _: f64) -> f64 {
                0.0
            }
            fn ellipticity_floor(&self) -> f64 {
                1.0
            }
            fn coefficient_bound(&self) -> f64 {
                1.0
            }
            fn driver_lipschitz(&self) -> Option<f64> {
                None
            }
        }
        let op = operator(
            1.0,
            2,
            1,
            BasisKind::Legendre,
            Arc::new(BadDriver),
            FluxVariant::UMinusPPlus,
        );
        let z = CoefField::zeros(op.mesh().clone(), op.basis().clone());
        match op.generator(0.0, 0.0, &z, &z) {
            Err(Error::DriverEvaluation { .. }) => {}
            other => panic!("expected driver error, got {other:?}"),
        }
    }

    #[test]
    fn terminal_coefficients_project_the_datum() {
        let op = operator(
            TAU,
            8,
            2,
            BasisKind::Legendre,
            sin_coef(GammaKind::Zero),
            FluxVariant::UMinusPPlus,
        );
        // w = 0: projection of cos x.
        let f = op.terminal_coefficients(0.0);
        let direct = project_l2(libm::cos, op.mesh(), op.basis());
        for (a, b) in f.raw().iter().zip(direct.raw()) {
            assert!((a - b).abs() < 1e-12);
        }
        // w = pi/2: cos(pi/2) = 0 kills the datum.
        let z = op.terminal_coefficients(core::f64::consts::FRAC_PI_2);
        assert!(z.raw().iter().all(|c| c.abs() < 1e-11));
    }

    #[test]
    fn flux_pairing_telescopes_to_zero() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        for flux in [FluxVariant::UMinusPPlus, FluxVariant::UPlusPMinus] {
            for k in [1usize, 2, 3] {
                let op = operator(TAU, 10, k, BasisKind::Legendre, sin_coef(GammaKind::Zero), flux);
                for _ in 0..25 {
                    let u = random_field(&op, &mut rng);
                    let p = random_field(&op, &mut rng);
                    let s = op.flux_pairing_sum(&u, &p).unwrap();
                    let bound = 1e-10 * (1.0 + u.l2_norm() * p.l2_norm());
                    assert!(s.abs() <= bound, "flux {flux:?} k={k}: sum {s}");
                }
            }
        }
    }

    #[test]
    fn flux_pairing_zero_field_gives_zero() {
        let op = operator(
            1.0,
            4,
            1,
            BasisKind::Legendre,
            sin_coef(GammaKind::Zero),
            FluxVariant::UMinusPPlus,
        );
        let z = CoefField::zeros(op.mesh().clone(), op.basis().clone());
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let p = random_field(&op, &mut rng);
        assert_eq!(op.flux_pairing_sum(&z, &p).unwrap(), 0.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let op = operator(
            1.0,
            4,
            2,
            BasisKind::Legendre,
            sin_coef(GammaKind::Zero),
            FluxVariant::UMinusPPlus,
        );
        let other_mesh = Arc::new(ElementMesh::uniform(1.0, 5).unwrap());
        let other_basis = Arc::new(BasisSet::with_default_quad(BasisKind::Legendre, 2).unwrap());
        let bad = CoefField::zeros(other_mesh, other_basis);
        assert!(op.discrete_gradient(&bad).is_err());
    }

    #[test]
    fn lipschitz_ratio_is_bounded_and_seed_stable() {
        let op = operator(
            TAU,
            10,
            2,
            BasisKind::Legendre,
            sin_coef(GammaKind::Softplus),
            FluxVariant::UMinusPPlus,
        );
        let mut max_ratio = [0.0f64; 2];
        for (idx, seed) in [7u64, 8].into_iter().enumerate() {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            for _ in 0..200 {
                let u1 = random_field(&op, &mut rng);
                let s1 = random_field(&op, &mut rng);
                let u2 = random_field(&op, &mut rng);
                let s2 = random_field(&op, &mut rng);
                let f1 = op.generator(0.1, 0.3, &u1, &s1).unwrap();
                let f2 = op.generator(0.1, 0.3, &u2, &s2).unwrap();
                let df: f64 = f1
                    .raw()
                    .iter()
                    .zip(f2.raw())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                let du: f64 = u1
                    .raw()
                    .iter()
                    .zip(u2.raw())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                let ds: f64 = s1
                    .raw()
                    .iter()
                    .zip(s2.raw())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                let ratio = df / (du + ds);
                assert!(ratio.is_finite());
                max_ratio[idx] = max_ratio[idx].max(ratio);
            }
        }
        let rel = (max_ratio[0] - max_ratio[1]).abs() / max_ratio[0].max(max_ratio[1]);
        assert!(rel <= 0.2, "max ratios {max_ratio:?}");
    }

    #[test]
    fn generator_vjp_matches_finite_differences() {
        let op = operator(
            TAU,
            4,
            2,
            BasisKind::Legendre,
            sin_coef(GammaKind::Softplus),
            FluxVariant::UMinusPPlus,
        );
        let dof = op.dof();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let u = random_field(&op, &mut rng);
        let psi = random_field(&op, &mut rng);
        let cot: Vec<f64> = (0..dof).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut grad_u = vec![0.0; dof];
        let mut grad_psi = vec![0.0; dof];
        let mut ws = op.make_workspace();
        op.generator_vjp(
            0.2,
            -0.3,
            u.raw(),
            psi.raw(),
            &cot,
            &mut grad_u,
            &mut grad_psi,
            &mut ws,
        );
        let scalar = |ur: &[f64], pr: &[f64]| -> f64 {
            let mut out = vec![0.0; dof];
            let mut ws = op.make_workspace();
            op.generator_into(0.2, -0.3, ur, pr, &mut out, &mut ws).unwrap();
            dot(&out, &cot)
        };
        let h = 1e-6;
        for i in 0..dof {
            let mut up = u.raw().to_vec();
            let mut dn = u.raw().to_vec();
            up[i] += h;
            dn[i] -= h;
            let fd = (scalar(&up, psi.raw()) - scalar(&dn, psi.raw())) / (2.0 * h);
            assert!(
                (fd - grad_u[i]).abs() <= 1e-6 * (1.0 + fd.abs()),
                "du[{i}]: vjp {} fd {fd}",
                grad_u[i]
            );
            let mut up = psi.raw().to_vec();
            let mut dn = psi.raw().to_vec();
            up[i] += h;
            dn[i] -= h;
            let fd = (scalar(u.raw(), &up) - scalar(u.raw(), &dn)) / (2.0 * h);
            assert!(
                (fd - grad_psi[i]).abs() <= 1e-6 * (1.0 + fd.abs()),
                "dpsi[{i}]: vjp {} fd {fd}",
                grad_psi[i]
            );
        }
    }
}
