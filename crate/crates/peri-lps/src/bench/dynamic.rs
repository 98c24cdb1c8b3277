//! Fracture benchmarks: pre-cracked glass, V-notched glass under impact and
//! an expanding ring.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{BenchmarkSpec, ProblemId, RunSummary};
use crate::dynamics::{
    count_fragments, extract_crack_features, CrackFeatures, DamageSnapshot, DynamicProblem, FeatureParams, FractureCriterion,
    FractureState, Integrator, RunStats, StepSolver, DEFAULT_SUBITERATION_CAP,
};
use crate::error::{Error, Result};
use crate::geometry::{disk_area, generate_grid_with, BoundaryKind, Domain, PointCloud, P2};
use crate::lps::{Material, MaterialField};
use crate::par::Exec;
use crate::quadrature::{active_points, build_rule_with, mask_from_domain};
use crate::static_solver::BoundaryConditions;

pub const GLASS_WIDTH: f64 = 0.1;
pub const GLASS_HEIGHT: f64 = 0.04;
pub const GLASS_CRACK: f64 = 0.05;
pub const GLASS_STRESS: f64 = 2e6;

pub const RING_INNER: f64 = 0.08;
pub const RING_OUTER: f64 = 0.15;
pub const RING_P0: f64 = 2.5e9;
pub const RING_T0: f64 = 1e-5;

/// V-notch specimen; the dimensions are our choice.
pub const VNOTCH_WIDTH: f64 = 0.152;
pub const VNOTCH_HEIGHT: f64 = 0.1;
pub const VNOTCH_DEPTH: f64 = 0.01;
pub const VNOTCH_HALF_OPENING: f64 = 0.005;
/// Piecewise linear notch-face pressure (time s, pressure Pa).
pub const VNOTCH_PULSE: [(f64, f64); 4] = [(0.0, 0.0), (15e-6, 60e6), (40e-6, 60e6), (60e-6, 0.0)];

/// What a dynamic run reports.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Features {
    pub problem: String,
    pub points: usize,
    pub h: f64,
    pub delta: f64,
    pub s0: f64,
    pub final_time: f64,
    pub broken_bonds: usize,
    pub stats: RunStats,
    pub crack: Option<CrackFeatures>,
    /// (large, small)
    pub fragments: Option<(usize, usize)>,
    pub wall_seconds: f64,
}

/// Domain, material and load history of a fracture benchmark.
pub struct DynamicCase {
    pub domain: Domain,
    pub material: Material,
    /// Spacing actually used (the ring derives it from a particle count).
    pub h: f64,
    pub traction: Box<dyn Fn(Option<usize>, P2, P2, f64) -> P2 + Send + Sync>,
    pub track_crack: bool,
}

fn interp(table: &[(f64, f64)], t: f64) -> f64 {
    match table.iter().position(|&(tk, _)| tk > t) {
        Some(0) => table[0].1,
        Some(k) => {
            let (t0, v0) = table[k - 1];
            let (t1, v1) = table[k];
            v0 + (v1 - v0) * (t - t0) / (t1 - t0)
        }
        None => table.last().map_or(0.0, |p| p.1),
    }
}

pub fn vnotch_domain() -> Domain {
    let (w, h, d, b) = (VNOTCH_WIDTH, VNOTCH_HEIGHT, VNOTCH_DEPTH, VNOTCH_HALF_OPENING);
    let v = vec![
        P2::new(0.0, 0.0),
        P2::new(w, 0.0),
        P2::new(w, h),
        P2::new(0.0, h),
        P2::new(0.0, h / 2.0 + b),
        P2::new(d, h / 2.0),
        P2::new(0.0, h / 2.0 - b),
    ];
    Domain::polygon("vnotch", v, vec![BoundaryKind::Neumann; 7]).with_lattice_shift(0.5, 0.5)
}

pub fn dynamic_case(spec: &BenchmarkSpec) -> Result<DynamicCase> {
    use BoundaryKind::Neumann;
    Ok(match spec.problem {
        ProblemId::GlassBranch => {
            let domain = Domain::rectangle("glass", P2::zeros(), P2::new(GLASS_WIDTH, GLASS_HEIGHT), [Neumann; 4])
                .with_cut(P2::new(0.0, GLASS_HEIGHT / 2.0), P2::new(GLASS_CRACK, GLASS_HEIGHT / 2.0))
                .with_lattice_shift(0.5, 0.5);
            // pieces: bottom, right, top, left, cut
            let traction = Box::new(|piece: Option<usize>, _: P2, _: P2, _: f64| match piece {
                Some(0) => P2::new(0.0, -GLASS_STRESS),
                Some(2) => P2::new(0.0, GLASS_STRESS),
                _ => P2::zeros(),
            });
            DynamicCase {
                domain,
                material: Material::plane_strain(spec.youngs, spec.nu).with_density(2440.0).with_fracture_energy(3.8),
                h: spec.h,
                traction,
                track_crack: true,
            }
        }
        ProblemId::Vnotch => {
            let traction = Box::new(|piece: Option<usize>, _: P2, n: P2, t: f64| match piece {
                Some(4) | Some(5) => -n * interp(&VNOTCH_PULSE, t),
                _ => P2::zeros(),
            });
            DynamicCase {
                domain: vnotch_domain(),
                material: Material::plane_stress(spec.youngs, spec.nu).with_density(2500.0).with_fracture_energy(8.0),
                h: spec.h,
                traction,
                track_crack: true,
            }
        }
        ProblemId::Ring => {
            let area = disk_area(RING_OUTER) - disk_area(RING_INNER);
            let h = spec.particles.map_or(spec.h, |n| (area / n as f64).sqrt());
            // inner piece 0; pressure pushes along −n
            let traction = Box::new(|piece: Option<usize>, _: P2, n: P2, t: f64| match piece {
                Some(0) => -n * (RING_P0 * (-t / RING_T0).exp()),
                _ => P2::zeros(),
            });
            DynamicCase {
                domain: Domain::annulus("ring", P2::zeros(), RING_INNER, RING_OUTER, Neumann, Neumann),
                material: Material::plane_strain(spec.youngs, spec.nu).with_density(7800.0).with_fracture_energy(1.125e5),
                h,
                traction,
                track_crack: false,
            }
        }
        p => return Err(Error::Config(format!("{p} is not a fracture benchmark"))),
    })
}

fn write_snapshot(path: &Path, header: &str, cloud: &PointCloud, s: &FractureState) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "# {header}")?;
    writeln!(f, "# t = {:.6e}", s.t)?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(["x", "y", "ux", "uy", "damage"])?;
    let phi = s.damage(cloud);
    for i in cloud.omega_indices() {
        let (x, u) = (cloud.positions[i], s.u[i]);
        w.write_record([x.x, x.y, u.x, u.y, phi[i]].map(|v| format!("{v:.9e}")))?;
    }
    w.flush()?;
    Ok(())
}

/// Time-step a fracture benchmark, writing snapshots and a features file.
pub fn run_dynamic(spec: &BenchmarkSpec, exec: Exec) -> Result<RunSummary> {
    let clock = Instant::now();
    let case = dynamic_case(spec)?;
    let cloud = generate_grid_with(&case.domain, case.h, spec.m_ratio, spec.perturb, spec.seed, exec)?;
    let rule = build_rule_with(&cloud, &active_points(&cloud), exec)?;
    let mask = mask_from_domain(&cloud, &case.domain);
    let materials = MaterialField::uniform(cloud.len(), case.material);
    let criterion = FractureCriterion::new(&case.material, cloud.delta)?;
    let traction = &case.traction;
    let bcs = BoundaryConditions::free().with_traction(move |k, xbar, n, t| traction(k, xbar, n, t));
    let n_omega = cloud.omega_indices().len();
    log::info!(
        "{}: {} points in Ω, h = {:.3e}, δ = {:.3e}, s0 = {:.4e}",
        spec.problem,
        n_omega,
        cloud.h,
        cloud.delta,
        criterion.s0
    );
    let problem = DynamicProblem {
        domain: &case.domain,
        cloud: &cloud,
        rule: &rule,
        materials: &materials,
        bcs: &bcs,
        normals: spec.normals.into(),
        dt: spec.dt,
        criterion,
        subiteration_cap: DEFAULT_SUBITERATION_CAP,
        solver: StepSolver::Krylov,
    };
    let mut integ = Integrator::new(problem, exec)?;
    let mut state = FractureState::at_rest(&cloud, mask);
    let steps = (spec.t_end / spec.dt).round() as usize;
    let header = spec.header();
    let mut files = Vec::new();
    let mut snaps = Vec::new();
    let record = |s: &FractureState, snaps: &mut Vec<DamageSnapshot>| {
        if case.track_crack {
            snaps.push(DamageSnapshot { t: s.t, damage: s.damage(&cloud) });
        }
    };
    record(&state, &mut snaps);
    for k in 1..=steps {
        let rep = integ.step(&mut state)?;
        if rep.newly_broken > 0 {
            log::debug!("step {k}: {} bonds broke over {} solves", rep.newly_broken, rep.solves);
        }
        if spec.feature_every > 0 && k % spec.feature_every == 0 {
            record(&state, &mut snaps);
        }
        if spec.dump_fields > 0 && k % spec.dump_fields == 0 {
            let path = spec.out.join(format!("{}_snap_{k:06}.csv", spec.problem));
            write_snapshot(&path, &header, &cloud, &state)?;
            files.push(path);
        }
        if k % 100 == 0 || k == steps {
            log::info!(
                "step {k}/{steps} t = {:.3e} broken = {} solves = {} GMRES iterations = {} elapsed {:.0}s",
                state.t,
                state.broken_bonds(&cloud),
                integ.stats.solves,
                integ.stats.krylov_iterations,
                clock.elapsed().as_secs_f64()
            );
        }
    }
    let crack = case
        .track_crack
        .then(|| extract_crack_features(&cloud, &snaps, &FeatureParams::default()));
    let features = Features {
        problem: spec.problem.to_string(),
        points: n_omega,
        h: cloud.h,
        delta: cloud.delta,
        s0: criterion.s0,
        final_time: state.t,
        broken_bonds: state.broken_bonds(&cloud),
        stats: integ.stats,
        crack,
        fragments: Some(count_fragments(&cloud, &state.mask)),
        wall_seconds: clock.elapsed().as_secs_f64(),
    };
    let path = spec.out.join(format!("{}_features.json", spec.problem));
    std::fs::write(&path, serde_json::to_string_pretty(&features).expect("features serialize"))?;
    files.push(path);
    Ok(RunSummary { files, table: None, features: Some(features) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pulse_interpolation() {
        assert_eq!(interp(&VNOTCH_PULSE, 0.0), 0.0);
        assert!((interp(&VNOTCH_PULSE, 7.5e-6) - 30e6).abs() < 1e-6);
        assert_eq!(interp(&VNOTCH_PULSE, 30e-6), 60e6);
        assert_eq!(interp(&VNOTCH_PULSE, 1.0), 0.0);
    }

    #[test]
    fn vnotch_shape() {
        let d = vnotch_domain();
        assert!(d.sdf(P2::new(0.05, 0.05)) < 0.0);
        // inside the notch is outside the body
        assert!(d.sdf(P2::new(0.002, 0.05)) > 0.0);
        assert!(d.sdf(P2::new(0.002, 0.02)) < 0.0);
    }

    #[test]
    fn ring_spacing_from_particles() {
        let mut s = BenchmarkSpec::for_problem(ProblemId::Ring);
        s.particles = Some(3124);
        let c = dynamic_case(&s).unwrap();
        let cloud = generate_grid_with(&c.domain, c.h, s.m_ratio, 0.0, 1, Exec::default()).unwrap();
        let n = cloud.omega_indices().len() as f64;
        assert!((n / 3124.0 - 1.0).abs() < 0.02, "{n}");
    }

    #[test]
    fn glass_first_step_breaks_nothing() {
        let mut s = BenchmarkSpec::for_problem(ProblemId::GlassBranch);
        s.h = 2e-3;
        s.t_end = s.dt;
        s.dump_fields = 0;
        let dir = tempfile::tempdir().unwrap();
        s.out = dir.path().to_path_buf();
        let r = run_dynamic(&s, Exec::default()).unwrap();
        let f = r.features.unwrap();
        let cloud_broken_initially = f.broken_bonds;
        assert_eq!(f.stats.solves, 1);
        assert!(cloud_broken_initially > 0, "the pre-crack is a broken-bond line");
        assert_eq!(f.fragments, Some((1, 0)));
    }
}
