//! Built-in oracle and property checks, runnable from the installed binary
//! without the test harness. Each check prints one PASS/FAIL line.

use std::sync::Arc;

use bspde_core::basis::{gauss_legendre, BasisKind, BasisSet};
use bspde_core::ldg::{FluxVariant, LdgOperator};
use bspde_core::march::{sample_brownian, solve_lsmc, LsmcConfig, TimeGrid};
use bspde_core::mesh::{CoefField, ElementMesh};
use bspde_core::nn::MlpNet;
use bspde_core::problems::{example1, example2, relative_error};
use bspde_core::projection::{project_gr_minus, project_gr_plus, project_l2};

type Check = (&'static str, fn() -> Result<(), String>);

fn quadrature_exactness() -> Result<(), String> {
    for q in 1..=16usize {
        let rule = gauss_legendre(q).map_err(|e| e.to_string())?;
        let wsum: f64 = rule.weights().iter().sum();
        if (wsum - 2.0).abs() > 1e-13 {
            return Err(format!("q={q}: weight sum {wsum}"));
        }
        for m in (0..=(2 * q - 1)).step_by(2) {
            let got = rule.integrate(|x| x.powi(m as i32));
            let want = 2.0 / (m as f64 + 1.0);
            if (got - want).abs() > 1e-12 * want.max(1.0) {
                return Err(format!("q={q} monomial {m}: {got} vs {want}"));
            }
        }
    }
    Ok(())
}

fn projection_orders() -> Result<(), String> {
    let tau = std::f64::consts::TAU;
    for k in [1usize, 2] {
        let basis = Arc::new(BasisSet::with_default_quad(BasisKind::Legendre, k).unwrap());
        let mut errs = Vec::new();
        for n in [8usize, 16] {
            let mesh = Arc::new(ElementMesh::uniform(tau, n).unwrap());
            let e = [
                project_l2(f64::cos, &mesh, &basis).l2_error(f64::cos),
                project_gr_plus(f64::cos, &mesh, &basis)
                    .unwrap()
                    .l2_error(f64::cos),
                project_gr_minus(f64::cos, &mesh, &basis)
                    .unwrap()
                    .l2_error(f64::cos),
            ];
            errs.push(e);
        }
        for which in 0..3 {
            let order = (errs[0][which] / errs[1][which]).log2();
            if order < k as f64 + 0.8 {
                return Err(format!("k={k} projection {which}: order {order:.2}"));
            }
        }
    }
    Ok(())
}

fn flux_telescoping() -> Result<(), String> {
    let spec = example1();
    for flux in [FluxVariant::UMinusPPlus, FluxVariant::UPlusPMinus] {
        for k in [1usize, 2, 3] {
            let mesh = Arc::new(ElementMesh::uniform(spec.domain_length(), 10).unwrap());
            let basis = Arc::new(BasisSet::with_default_quad(BasisKind::Legendre, k).unwrap());
            let op = LdgOperator::new(mesh.clone(), basis.clone(), spec.coefficients().clone(), flux)
                .unwrap();
            let mut state = 0x2458_71d3_9bf0_11u64;
            let mut rand = move || {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
            };
            for _ in 0..20 {
                let mut u = CoefField::zeros(mesh.clone(), basis.clone());
                let mut p = CoefField::zeros(mesh.clone(), basis.clone());
                u.raw_mut().iter_mut().for_each(|c| *c = rand());
                p.raw_mut().iter_mut().for_each(|c| *c = rand());
                let s = op.flux_pairing_sum(&u, &p).unwrap();
                let bound = 1e-10 * (1.0 + u.l2_norm() * p.l2_norm());
                if s.abs() > bound {
                    return Err(format!("k={k} {flux:?}: pairing sum {s:.3e}"));
                }
            }
        }
    }
    Ok(())
}

fn exact_solution_residuals() -> Result<(), String> {
    for spec in [example1(), example2()] {
        let c = spec.coefficients();
        let horizon = spec.horizon();
        let mut state = 0x91u64;
        let mut rand = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..200 {
            let x = rand() * spec.domain_length();
            let t = rand() * horizon;
            let w = rand() * 4.0 - 2.0;
            let e = (-0.5f64 * (horizon - t)).exp();
            let u = x.cos() * e * w.cos();
            let v = -x.sin() * e * w.cos();
            let u_xx = -x.cos() * e * w.cos();
            let psi = -x.cos() * e * w.sin();
            let psi_x = x.sin() * e * w.sin();
            let sig = c.sigma(x, t, w);
            let sigb = c.sigma_bar(x, t, w);
            let bracket = 0.5 * (sig * sig + sigb * sigb) * u_xx
                + sig * psi_x
                + c.gamma(x, t, w, u, v, psi);
            let residual = 0.5 * u - 0.5 * u + bracket;
            if residual.abs() > 1e-9 {
                return Err(format!(
                    "{}: residual {residual:.3e} at ({x:.3},{t:.3},{w:.3})",
                    spec.name()
                ));
            }
        }
    }
    Ok(())
}

fn brownian_reproducibility() -> Result<(), String> {
    let grid = TimeGrid::uniform(0.5, 10).unwrap();
    let a = sample_brownian(&grid, 2_000, 9);
    let b = sample_brownian(&grid, 2_000, 9);
    for p in (0..2_000).step_by(97) {
        for i in 0..=10 {
            if a.state(p, i) != b.state(p, i) {
                return Err(format!("path {p} state {i} differs across replays"));
            }
        }
    }
    let var: f64 = (0..2_000).map(|p| a.increment(p, 3).powi(2)).sum::<f64>() / 2_000.0;
    if (var - 0.05).abs() > 0.05 * 0.07 {
        return Err(format!("increment variance {var} vs 0.05"));
    }
    Ok(())
}

fn lsmc_determinism_and_accuracy() -> Result<(), String> {
    let spec = example1();
    let mesh = Arc::new(ElementMesh::uniform(spec.domain_length(), 8).unwrap());
    let basis = Arc::new(BasisSet::with_default_quad(BasisKind::Legendre, 2).unwrap());
    let op = LdgOperator::new(
        mesh,
        basis,
        spec.coefficients().clone(),
        FluxVariant::UMinusPPlus,
    )
    .unwrap();
    let grid = TimeGrid::uniform(spec.horizon(), 10).unwrap();
    let cfg = LsmcConfig {
        n_paths: 4_000,
        degree: 5,
        seed: 5,
        energy_diagnostics: false,
    };
    let a = solve_lsmc(&op, &grid, &cfg).map_err(|e| e.to_string())?;
    let b = solve_lsmc(&op, &grid, &cfg).map_err(|e| e.to_string())?;
    if a.u0_field().raw() != b.u0_field().raw() {
        return Err("identical seeds gave different coefficients".into());
    }
    let u0 = spec.reference_profile().unwrap();
    let re = relative_error(a.u0_field(), u0).map_err(|e| e.to_string())?;
    if re > 1e-3 {
        return Err(format!("R_E {re:.3e} above the smoke threshold 1e-3"));
    }
    Ok(())
}

fn checkpoint_round_trip() -> Result<(), String> {
    let mut net = MlpNet::init(12, 3141);
    let x: Vec<f64> = (0..32).map(|i| i as f64 * 0.13 - 2.0).collect();
    net.forward_train(&x, 32).map_err(|e| e.to_string())?;
    let bytes = net.encode();
    let back = MlpNet::decode(&bytes).map_err(|e| e.to_string())?;
    if back != net {
        return Err("decoded network differs".into());
    }
    Ok(())
}

const CHECKS: &[Check] = &[
    ("quadrature exactness", quadrature_exactness),
    ("projection convergence orders", projection_orders),
    ("flux pairing telescopes", flux_telescoping),
    ("exact-solution drift residuals", exact_solution_residuals),
    ("brownian sampling reproducibility", brownian_reproducibility),
    ("lsmc determinism and smoke accuracy", lsmc_determinism_and_accuracy),
    ("checkpoint round trip", checkpoint_round_trip),
];

/// Run every check; returns the number of failures.
pub fn run_selftest() -> usize {
    let mut failures = 0;
    for (name, check) in CHECKS {
        match check() {
            Ok(()) => println!("PASS {name}"),
            Err(msg) => {
                failures += 1;
                println!("FAIL {name}: {msg}");
            }
        }
    }
    failures
}
