//! Polynomial bases on the reference cell `[-1, 1]` and Gauss-Legendre
//! quadrature for element integrals.
//!
//! Two basis kinds are provided: classical (unnormalised) Legendre
//! polynomials with `P_l(1) = 1`, which give a diagonal mass matrix, and
//! Lagrange cardinal polynomials on the Gauss-Lobatto nodes. All quantities
//! on a physical cell are obtained from the reference cell by the affine map
//! `x = x_j + (h_j / 2) xi`; derivative chain-rule factors `2 / h_j` are the
//! caller's responsibility.

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Hard cap on quadrature size; enough for every supported basis degree.
pub const MAX_QUAD_POINTS: usize = 32;

/// Highest supported polynomial degree.
pub const MAX_DEGREE: usize = 8;

/// A Gauss-Legendre rule on `[-1, 1]`.
///
/// `q` points integrate polynomials up to degree `2q - 1` exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadRule {
    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Integrate `f` over `[-1, 1]`.
    pub fn integrate(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }
}

/// Legendre polynomial value `P_n(x)` by the three-term recurrence.
pub fn legendre(n: usize, x: f64) -> f64 {
    legendre_pair(n, x).0
}

/// `(P_n(x), P_n'(x))`, both by recurrences that stay exact at `x = ±1`.
pub fn legendre_pair(n: usize, x: f64) -> (f64, f64) {
    let mut p_prev = 1.0; // P_0
    let mut d_prev = 0.0;
    if n == 0 {
        return (p_prev, d_prev);
    }
    let mut p = x; // P_1
    let mut d = 1.0;
    for m in 1..n {
        let mf = m as f64;
        let p_next = ((2.0 * mf + 1.0) * x * p - mf * p_prev) / (mf + 1.0);
        let d_next = d_prev + (2.0 * mf + 1.0) * p;
        p_prev = p;
        d_prev = d;
        p = p_next;
        d = d_next;
    }
    (p, d)
}

/// Build the `q`-point Gauss-Legendre rule by Newton iteration on the roots
/// of `P_q`, to a tolerance of 1e-15.
pub fn gauss_legendre(q: usize) -> Result<QuadRule> {
    if q < 1 || q > MAX_QUAD_POINTS {
        return Err(Error::invalid(alloc::format!(
            "quadrature order {q} outside 1..={MAX_QUAD_POINTS}"
        )));
    }
    let mut nodes = vec![0.0; q];
    let mut weights = vec![0.0; q];
    // Only the lower half is iterated; the rest follows by symmetry.
    for i in 0..(q + 1) / 2 {
        // Tricomi-style initial guess for the i-th largest root.
        let mut x = libm::cos(core::f64::consts::PI * (i as f64 + 0.75) / (q as f64 + 0.5));
        for _ in 0..100 {
            let (p, d) = legendre_pair(q, x);
            let step = p / d;
            x -= step;
            if step.abs() <= 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre_pair(q, x);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[q - 1 - i] = x;
        weights[q - 1 - i] = w;
        nodes[i] = -x;
        weights[i] = w;
    }
    if q % 2 == 1 {
        nodes[q / 2] = 0.0;
        let (_, d) = legendre_pair(q, 0.0);
        weights[q / 2] = 2.0 / (d * d);
    }
    Ok(QuadRule { nodes, weights })
}

/// Gauss-Lobatto points for a degree-`k` nodal basis: `±1` plus the interior
/// roots of `P_k'`.
pub fn gauss_lobatto_nodes(k: usize) -> Result<Vec<f64>> {
    if k < 1 || k > MAX_DEGREE {
        return Err(Error::invalid(alloc::format!(
            "basis degree {k} outside 1..={MAX_DEGREE}"
        )));
    }
    let mut nodes = vec![0.0; k + 1];
    nodes[0] = -1.0;
    nodes[k] = 1.0;
    let n = k as f64;
    for i in 1..k {
        // Chebyshev-Lobatto starting point.
        let mut x = -libm::cos(core::f64::consts::PI * i as f64 / n);
        for _ in 0..100 {
            let (p, d) = legendre_pair(k, x);
            // P_k'' from the Legendre ODE.
            let dd = (2.0 * x * d - n * (n + 1.0) * p) / (1.0 - x * x);
            let step = d / dd;
            x -= step;
            if step.abs() <= 1e-15 {
                break;
            }
        }
        nodes[i] = x;
    }
    if k % 2 == 0 && k >= 2 {
        nodes[k / 2] = 0.0;
    }
    Ok(nodes)
}

/// Which family of reference-cell polynomials spans the local space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisKind {
    /// Legendre modes `P_0..P_k`, `P_l(1) = 1`.
    Legendre,
    /// Lagrange cardinal polynomials on the Gauss-Lobatto nodes.
    Lagrange,
}

/// A degree-`k` basis on the reference cell, with its quadrature rule and
/// cached evaluation tables at the quadrature nodes and at `±1`.
#[derive(Debug, Clone)]
pub struct BasisSet {
    kind: BasisKind,
    degree: usize,
    /// Interpolation nodes; empty for the modal Legendre basis.
    nodes: Vec<f64>,
    quad: QuadRule,
    /// `phi_at_quad[q * (k+1) + l] = phi_l(xi_q)`.
    phi_at_quad: Vec<f64>,
    dphi_at_quad: Vec<f64>,
    phi_left: Vec<f64>,
    phi_right: Vec<f64>,
}

impl BasisSet {
    /// Basis with an explicit quadrature rule. The rule must have at least
    /// `k + 1` points so that the mass matrix it induces is exact.
    pub fn new(kind: BasisKind, degree: usize, quad: QuadRule) -> Result<Self> {
        if degree < 1 || degree > MAX_DEGREE {
            return Err(Error::invalid(alloc::format!(
                "basis degree {degree} outside 1..={MAX_DEGREE}"
            )));
        }
        if quad.order() < degree + 1 {
            return Err(Error::invalid(alloc::format!(
                "quadrature order {} too small for degree {degree} (need >= {})",
                quad.order(),
                degree + 1
            )));
        }
        let nodes = match kind {
            BasisKind::Legendre => Vec::new(),
            BasisKind::Lagrange => gauss_lobatto_nodes(degree)?,
        };
        let dim = degree + 1;
        let mut basis = BasisSet {
            kind,
            degree,
            nodes,
            quad,
            phi_at_quad: Vec::new(),
            dphi_at_quad: Vec::new(),
            phi_left: Vec::new(),
            phi_right: Vec::new(),
        };
        let q = basis.quad.order();
        let mut phi = vec![0.0; q * dim];
        let mut dphi = vec![0.0; q * dim];
        for (iq, &xi) in basis.quad.nodes().iter().enumerate() {
            basis.eval_into(xi, &mut phi[iq * dim..(iq + 1) * dim]);
            basis.eval_deriv_into(xi, &mut dphi[iq * dim..(iq + 1) * dim]);
        }
        let mut left = vec![0.0; dim];
        let mut right = vec![0.0; dim];
        basis.eval_into(-1.0, &mut left);
        basis.eval_into(1.0, &mut right);
        basis.phi_at_quad = phi;
        basis.dphi_at_quad = dphi;
        basis.phi_left = left;
        basis.phi_right = right;
        Ok(basis)
    }

    /// Basis with the default quadrature order `k + 2`.
    pub fn with_default_quad(kind: BasisKind, degree: usize) -> Result<Self> {
        let quad = gauss_legendre(degree + 2)?;
        Self::new(kind, degree, quad)
    }

    pub fn kind(&self) -> BasisKind {
        self.kind
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Number of basis functions, `k + 1`.
    pub fn dim(&self) -> usize {
        self.degree + 1
    }

    pub fn quad(&self) -> &QuadRule {
        &self.quad
    }

    /// Values of all basis functions at quadrature node `iq`.
    pub fn phi_at_quad(&self, iq: usize) -> &[f64] {
        let d = self.dim();
        &self.phi_at_quad[iq * d..(iq + 1) * d]
    }

    /// Reference-cell derivatives of all basis functions at quadrature node `iq`.
    pub fn dphi_at_quad(&self, iq: usize) -> &[f64] {
        let d = self.dim();
        &self.dphi_at_quad[iq * d..(iq + 1) * d]
    }

    /// Values at the left reference endpoint `-1`.
    pub fn phi_left(&self) -> &[f64] {
        &self.phi_left
    }

    /// Values at the right reference endpoint `+1`.
    pub fn phi_right(&self) -> &[f64] {
        &self.phi_right
    }

    /// Evaluate `(phi_0, .., phi_k)` at `x_ref` in `[-1, 1]`.
    pub fn eval(&self, x_ref: f64) -> Result<Vec<f64>> {
        self.check_ref(x_ref)?;
        let mut out = vec![0.0; self.dim()];
        self.eval_into(x_ref, &mut out);
        Ok(out)
    }

    /// Evaluate reference-cell derivatives at `x_ref` in `[-1, 1]`.
    pub fn eval_deriv(&self, x_ref: f64) -> Result<Vec<f64>> {
        self.check_ref(x_ref)?;
        let mut out = vec![0.0; self.dim()];
        self.eval_deriv_into(x_ref, &mut out);
        Ok(out)
    }

    fn check_ref(&self, x_ref: f64) -> Result<()> {
        if !(-1.0..=1.0).contains(&x_ref) {
            return Err(Error::invalid(alloc::format!(
                "reference coordinate {x_ref} outside [-1, 1]"
            )));
        }
        Ok(())
    }

    fn eval_into(&self, x: f64, out: &mut [f64]) {
        match self.kind {
            BasisKind::Legendre => {
                out[0] = 1.0;
                if self.degree >= 1 {
                    out[1] = x;
                }
                for m in 1..self.degree {
                    let mf = m as f64;
                    out[m + 1] = ((2.0 * mf + 1.0) * x * out[m] - mf * out[m - 1]) / (mf + 1.0);
                }
            }
            BasisKind::Lagrange => {
                for (i, oi) in out.iter_mut().enumerate() {
                    let xi = self.nodes[i];
                    let mut prod = 1.0;
                    for (j, &xj) in self.nodes.iter().enumerate() {
                        if j != i {
                            prod *= (x - xj) / (xi - xj);
                        }
                    }
                    *oi = prod;
                }
            }
        }
    }

    fn eval_deriv_into(&self, x: f64, out: &mut [f64]) {
        match self.kind {
            BasisKind::Legendre => {
                let mut p_prev = 1.0;
                let mut p = x;
                out[0] = 0.0;
                if self.degree >= 1 {
                    out[1] = 1.0;
                }
                for m in 1..self.degree {
                    let mf = m as f64;
                    let p_next = ((2.0 * mf + 1.0) * x * p - mf * p_prev) / (mf + 1.0);
                    out[m + 1] = out[m - 1] + (2.0 * mf + 1.0) * p;
                    p_prev = p;
                    p = p_next;
                }
            }
            BasisKind::Lagrange => {
                for (i, oi) in out.iter_mut().enumerate() {
                    let xi = self.nodes[i];
                    let mut sum = 0.0;
                    for (m, &xm) in self.nodes.iter().enumerate() {
                        if m == i {
                            continue;
                        }
                        let mut prod = 1.0 / (xi - xm);
                        for (j, &xj) in self.nodes.iter().enumerate() {
                            if j != i && j != m {
                                prod *= (x - xj) / (xi - xj);
                            }
                        }
                        sum += prod;
                    }
                    *oi = sum;
                }
            }
        }
    }

    /// Gram matrix of the basis under its own quadrature rule, row-major.
    pub fn gram(&self) -> Vec<f64> {
        let d = self.dim();
        let mut g = vec![0.0; d * d];
        for (iq, &w) in self.quad.weights().iter().enumerate() {
            let phi = self.phi_at_quad(iq);
            for m in 0..d {
                for l in 0..d {
                    g[m * d + l] += w * phi[m] * phi[l];
                }
            }
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Lu;

    #[test]
    fn one_point_rule_is_midpoint() {
        let q = gauss_legendre(1).unwrap();
        assert_eq!(q.nodes(), &[0.0]);
        assert_eq!(q.weights(), &[2.0]);
    }

    #[test]
    fn two_point_rule_matches_hand_solution() {
        // Exactness on 1, x, x^2, x^3 forces nodes ±1/sqrt(3), weights 1.
        let q = gauss_legendre(2).unwrap();
        let s3 = 1.0 / 3.0f64.sqrt();
        assert!((q.nodes()[0] + s3).abs() < 1e-15);
        assert!((q.nodes()[1] - s3).abs() < 1e-15);
        assert!((q.weights()[0] - 1.0).abs() < 1e-15);
        assert!((q.weights()[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn three_point_rule_integrates_quartic() {
        let q = gauss_legendre(3).unwrap();
        let got = q.integrate(|x| x.powi(4));
        assert!((got - 0.4).abs() < 1e-12);
    }

    #[test]
    fn rules_are_exact_up_to_degree_2q_minus_1() {
        for q in 1..=MAX_QUAD_POINTS {
            let rule = gauss_legendre(q).unwrap();
            let wsum: f64 = rule.weights().iter().sum();
            assert!((wsum - 2.0).abs() <= 1e-13, "q={q} weight sum {wsum}");
            assert!(rule.weights().iter().all(|&w| w > 0.0));
            for m in 0..=(2 * q - 1) {
                let got = rule.integrate(|x| x.powi(m as i32));
                let exact = if m % 2 == 1 {
                    0.0
                } else {
                    2.0 / (m as f64 + 1.0)
                };
                let tol = 1e-12 * exact.abs().max(1.0);
                assert!(
                    (got - exact).abs() <= tol,
                    "q={q} m={m} got {got} want {exact}"
                );
            }
        }
    }

    #[test]
    fn quadrature_order_is_validated() {
        assert!(gauss_legendre(0).is_err());
        assert!(gauss_legendre(MAX_QUAD_POINTS + 1).is_err());
    }

    #[test]
    fn legendre_values_at_one_are_one() {
        let b = BasisSet::with_default_quad(BasisKind::Legendre, 2).unwrap();
        let vals = b.eval(1.0).unwrap();
        for v in vals {
            assert!((v - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn legendre_linear_mode_vanishes_at_zero() {
        let b = BasisSet::with_default_quad(BasisKind::Legendre, 1).unwrap();
        let vals = b.eval(0.0).unwrap();
        assert!((vals[0] - 1.0).abs() < 1e-14);
        assert!(vals[1].abs() < 1e-14);
    }

    #[test]
    fn lagrange_is_cardinal_at_its_nodes() {
        let b = BasisSet::with_default_quad(BasisKind::Lagrange, 2).unwrap();
        let nodes = gauss_lobatto_nodes(2).unwrap();
        for (i, &x) in nodes.iter().enumerate() {
            let vals = b.eval(x).unwrap();
            for (j, v) in vals.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((v - want).abs() < 1e-13, "l_{j}({x}) = {v}");
            }
        }
    }

    #[test]
    fn gauss_lobatto_nodes_match_closed_forms() {
        let n2 = gauss_lobatto_nodes(2).unwrap();
        assert!((n2[0] + 1.0).abs() < 1e-15);
        assert!(n2[1].abs() < 1e-15);
        assert!((n2[2] - 1.0).abs() < 1e-15);
        let n3 = gauss_lobatto_nodes(3).unwrap();
        let r = (1.0f64 / 5.0).sqrt();
        assert!((n3[1] + r).abs() < 1e-14);
        assert!((n3[2] - r).abs() < 1e-14);
    }

    #[test]
    fn eval_outside_reference_cell_is_an_error() {
        let b = BasisSet::with_default_quad(BasisKind::Legendre, 2).unwrap();
        assert!(b.eval(1.0 + 1e-12).is_err());
        assert!(b.eval_deriv(-1.1).is_err());
    }

    #[test]
    fn derivative_of_constant_and_linear_modes() {
        let b = BasisSet::with_default_quad(BasisKind::Legendre, 3).unwrap();
        for &x in &[-1.0, -0.3, 0.0, 0.7, 1.0] {
            let d = b.eval_deriv(x).unwrap();
            assert!(d[0].abs() < 1e-14);
            assert!((d[1] - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn derivatives_match_central_differences() {
        for kind in [BasisKind::Legendre, BasisKind::Lagrange] {
            let b = BasisSet::with_default_quad(kind, 3).unwrap();
            let h = 1e-6;
            for &x in &[-0.9, -0.2, 0.1, 0.55, 0.9] {
                let d = b.eval_deriv(x).unwrap();
                let up = b.eval(x + h).unwrap();
                let dn = b.eval(x - h).unwrap();
                for l in 0..b.dim() {
                    let fd = (up[l] - dn[l]) / (2.0 * h);
                    assert!(
                        (d[l] - fd).abs() <= 1e-7,
                        "{kind:?} l={l} x={x}: {} vs fd {fd}",
                        d[l]
                    );
                }
            }
        }
    }

    #[test]
    fn legendre_gram_is_diagonal() {
        let b = BasisSet::with_default_quad(BasisKind::Legendre, 4).unwrap();
        let d = b.dim();
        let g = b.gram();
        for m in 0..d {
            for l in 0..d {
                if m == l {
                    let want = 2.0 / (2.0 * m as f64 + 1.0);
                    assert!((g[m * d + l] - want).abs() < 1e-12);
                } else {
                    assert!(g[m * d + l].abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn bases_reproduce_polynomials() {
        // Project a random degree-k polynomial onto the basis via the Gram
        // system, then compare pointwise at many reference points.
        let mut seed = 0x9e3779b97f4a7c15u64;
        let mut rand = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (seed >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        for kind in [BasisKind::Legendre, BasisKind::Lagrange] {
            for k in 1..=4usize {
                let b = BasisSet::with_default_quad(kind, k).unwrap();
                let dim = b.dim();
                let mono: Vec<f64> = (0..dim).map(|_| rand()).collect();
                let poly = |x: f64| {
                    let mut acc = 0.0;
                    for c in mono.iter().rev() {
                        acc = acc * x + c;
                    }
                    acc
                };
                // Moments against the basis under quadrature (exact here).
                let mut rhs = vec![0.0; dim];
                for (iq, (&xi, &w)) in b
                    .quad()
                    .nodes()
                    .iter()
                    .zip(b.quad().weights())
                    .enumerate()
                {
                    let phi = b.phi_at_quad(iq);
                    for l in 0..dim {
                        rhs[l] += w * poly(xi) * phi[l];
                    }
                }
                let lu = Lu::factor(&b.gram(), dim).unwrap();
                let coef = lu.solve(&rhs);
                for _ in 0..100 {
                    let x = rand();
                    let vals = b.eval(x).unwrap();
                    let got: f64 = coef.iter().zip(&vals).map(|(c, v)| c * v).sum();
                    assert!(
                        (got - poly(x)).abs() <= 1e-10,
                        "{kind:?} k={k}: {got} vs {}",
                        poly(x)
                    );
                }
            }
        }
    }
}
