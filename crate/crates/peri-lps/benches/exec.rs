//! Sequential against rayon for the two per-point hot loops.
//! With `--no-default-features` both variants run sequentially.

use std::f64::consts::PI;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use peri_lps::geometry::{generate_grid, BoundaryKind, Domain, FrameSource, P2};
use peri_lps::lps::{Material, MaterialField};
use peri_lps::quadrature::{active_points, build_rule_with, mask_from_domain};
use peri_lps::static_solver::{assemble_with, BoundaryConditions, StaticProblem};
use peri_lps::Exec;

fn square() -> Domain {
    let a = PI / 2.0;
    Domain::rectangle("sq", P2::new(-a, -a), P2::new(a, a), [BoundaryKind::Dirichlet, BoundaryKind::Neumann, BoundaryKind::Neumann, BoundaryKind::Dirichlet])
}

fn policies(c: &mut Criterion) {
    let d = square();
    let cloud = generate_grid(&d, PI / 32.0, 3.5, 0.1, 1).unwrap();
    let active = active_points(&cloud);
    let rule = build_rule_with(&cloud, &active, Exec::Parallel).unwrap();
    let mask = mask_from_domain(&cloud, &d);
    let mats = MaterialField::uniform(cloud.len(), Material::plane_strain(1.0, 0.3));
    let bcs = BoundaryConditions::new(|x| P2::new(0.1 * x.x, -0.05 * x.y)).with_traction(|_, _, n, _| n * 0.1);
    let problem = StaticProblem {
        domain: &d,
        cloud: &cloud,
        rule: &rule,
        mask: &mask,
        materials: &mats,
        bcs: &bcs,
        normals: FrameSource::Estimated,
        time: 0.0,
    };

    let mut g = c.benchmark_group("quadrature");
    g.sample_size(10);
    for exec in [Exec::Sequential, Exec::Parallel] {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &e| {
            b.iter(|| build_rule_with(&cloud, &active, e).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("assembly");
    g.sample_size(10);
    for exec in [Exec::Sequential, Exec::Parallel] {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &e| {
            b.iter(|| assemble_with(&problem, None, e).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, policies);
criterion_main!(benches);
