use std::sync::Arc;
use std::time::Instant;
use bspde_core::basis::{BasisKind, BasisSet};
use bspde_core::ldg::{FluxVariant, LdgOperator};
use bspde_core::march::{solve_dbdp, DbdpConfig, TimeGrid};
use bspde_core::mesh::ElementMesh;
use bspde_core::problems::{example1, example2, relative_error};

fn main() {
    for (name, spec) in [("ex1", example1()), ("ex2", example2())] {
        for n in [10usize, 15, 20] {
            let mesh = Arc::new(ElementMesh::uniform(spec.domain_length(), n).unwrap());
            let basis = Arc::new(BasisSet::with_default_quad(BasisKind::Legendre, 2).unwrap());
            let op = LdgOperator::new(mesh, basis, spec.coefficients().clone(), FluxVariant::UMinusPPlus).unwrap();
            let grid = TimeGrid::uniform(spec.horizon(), 10).unwrap();
            let mut res_line = String::new();
            let t0 = Instant::now();
            for seed in [1u64, 2, 3] {
                let cfg = DbdpConfig {
                    batch_size: 256,
                    steps_per_stage: 400,
                    learning_rate: 1e-2,
                    lr_decay: 0.5,
                    lr_decay_every: 200,
                    warm_start: true,
                    seed,
                };
                let res = solve_dbdp(&op, &grid, &cfg).unwrap();
                let u0 = spec.reference_profile().unwrap();
                let re = relative_error(res.u0_field(), u0).unwrap();
                res_line += &format!("{re:.2e} ");
            }
            println!("{name} N={n}: R_E = {res_line} ({:.0} s total)", t0.elapsed().as_secs_f64());
        }
    }
}
