//! Benchmark definitions, configuration and drivers.

pub mod analytic;
pub mod dynamic;

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{generate_grid_with, BoundaryKind, Domain, FrameSource, PointCloud, P2};
use crate::lps::{Material, MaterialField};
use crate::par::Exec;
use crate::quadrature::{active_points, build_rule_with, mask_from_domain};
use crate::static_solver::{
    assemble_with, convergence_study, l2_error, l2_error_scalar, unpack, write_convergence_csv, write_field_csv, BoundaryConditions,
    ConvergenceRow, ConvergenceTable, LinearSolver, StaticProblem, StaticSolution,
};
use analytic::{patch, patch_stress, Disk, Hole, Inclusion, Manufactured, PATCH_DIV};
use BoundaryKind::{Dirichlet, Neumann};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemId {
    Patch1,
    Patch2,
    Patch3,
    Manufactured1,
    Manufactured2,
    Manufactured3,
    Hole,
    Disk,
    Composite,
    GlassBranch,
    Vnotch,
    Ring,
}

impl ProblemId {
    pub const ALL: [ProblemId; 12] = [
        ProblemId::Patch1,
        ProblemId::Patch2,
        ProblemId::Patch3,
        ProblemId::Manufactured1,
        ProblemId::Manufactured2,
        ProblemId::Manufactured3,
        ProblemId::Hole,
        ProblemId::Disk,
        ProblemId::Composite,
        ProblemId::GlassBranch,
        ProblemId::Vnotch,
        ProblemId::Ring,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProblemId::Patch1 => "patch1",
            ProblemId::Patch2 => "patch2",
            ProblemId::Patch3 => "patch3",
            ProblemId::Manufactured1 => "manufactured1",
            ProblemId::Manufactured2 => "manufactured2",
            ProblemId::Manufactured3 => "manufactured3",
            ProblemId::Hole => "hole",
            ProblemId::Disk => "disk",
            ProblemId::Composite => "composite",
            ProblemId::GlassBranch => "glass_branch",
            ProblemId::Vnotch => "vnotch",
            ProblemId::Ring => "ring",
        }
    }

    pub fn parse(s: &str) -> Option<ProblemId> {
        ProblemId::ALL.into_iter().find(|p| p.as_str() == s)
    }

    pub fn is_dynamic(self) -> bool {
        matches!(self, ProblemId::GlassBranch | ProblemId::Vnotch | ProblemId::Ring)
    }

    /// Boundary setting 1, 2 or 3 for the square problems.
    fn setting(self) -> Option<u8> {
        match self {
            ProblemId::Patch1 | ProblemId::Manufactured1 => Some(1),
            ProblemId::Patch2 | ProblemId::Manufactured2 => Some(2),
            ProblemId::Patch3 | ProblemId::Manufactured3 => Some(3),
            _ => None,
        }
    }
}

impl std::fmt::Display for ProblemId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normals {
    #[default]
    Estimated,
    Exact,
}

impl From<Normals> for FrameSource {
    fn from(n: Normals) -> FrameSource {
        match n {
            Normals::Estimated => FrameSource::Estimated,
            Normals::Exact => FrameSource::Exact,
        }
    }
}

/// One benchmark run. Serialized as a flat TOML table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub problem: ProblemId,
    /// Grid spacing for single runs and dynamics.
    pub h: f64,
    /// Resolutions of a convergence study; empty means just `h`.
    pub h_list: Vec<f64>,
    pub m_ratio: f64,
    pub nu: f64,
    pub youngs: f64,
    pub perturb: f64,
    pub seed: u64,
    /// Perturbed grids are averaged over seeds `seed..seed + seeds`.
    pub seeds: u64,
    pub normals: Normals,
    pub dt: f64,
    pub t_end: f64,
    pub out: PathBuf,
    /// Snapshot every this many steps; 0 writes none.
    pub dump_fields: usize,
    /// Damage is sampled for crack features every this many steps.
    pub feature_every: usize,
    /// Ring particle count; overrides `h`.
    pub particles: Option<usize>,
    /// Composite inclusion phase; defaults to twice `youngs` and the same ν.
    pub youngs_inclusion: Option<f64>,
    pub nu_inclusion: Option<f64>,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec::for_problem(ProblemId::Patch1)
    }
}

impl BenchmarkSpec {
    /// Default settings for a problem.
    pub fn for_problem(problem: ProblemId) -> BenchmarkSpec {
        let mut s = BenchmarkSpec {
            problem,
            h: PI / 16.0,
            h_list: vec![PI / 16.0, PI / 32.0, PI / 64.0],
            m_ratio: 3.5,
            nu: 0.3,
            youngs: 1.0,
            perturb: 0.0,
            seed: 1,
            seeds: 1,
            normals: Normals::Estimated,
            dt: 0.0,
            t_end: 0.0,
            out: PathBuf::from("out"),
            dump_fields: 0,
            feature_every: 0,
            particles: None,
            youngs_inclusion: None,
            nu_inclusion: None,
        };
        match problem {
            ProblemId::Hole => {
                s.h = 1.0 / 20.0;
                s.h_list = vec![1.0 / 20.0, 1.0 / 40.0, 1.0 / 80.0];
            }
            // coarser levels are still pre-asymptotic for these two
            ProblemId::Composite => {
                s.h = 1.0 / 30.0;
                s.h_list = vec![1.0 / 30.0, 1.0 / 60.0, 1.0 / 120.0];
            }
            ProblemId::Manufactured1 | ProblemId::Manufactured2 | ProblemId::Manufactured3 => {
                s.h = PI / 32.0;
                s.h_list = vec![PI / 32.0, PI / 64.0, PI / 128.0];
            }
            ProblemId::Disk => {
                s.h = 0.1;
                s.h_list = vec![0.1, 0.05, 0.025];
            }
            ProblemId::GlassBranch => {
                s.h = 5e-4;
                s.h_list = vec![];
                s.m_ratio = 4.0;
                s.youngs = 72e9;
                s.nu = 0.23;
                s.dt = 6.25e-8;
                s.t_end = 42e-6;
                s.dump_fields = 64;
                s.feature_every = 8;
            }
            ProblemId::Vnotch => {
                s.h = 1e-3;
                s.h_list = vec![];
                s.m_ratio = 4.0;
                s.youngs = 70e9;
                s.nu = 0.22;
                s.dt = 1.25e-7;
                s.t_end = 60e-6;
                s.dump_fields = 40;
                s.feature_every = 4;
            }
            ProblemId::Ring => {
                s.h_list = vec![];
                s.m_ratio = 4.0;
                s.particles = Some(3124);
                s.youngs = 200e9;
                s.nu = 0.3;
                s.perturb = 0.2;
                s.dt = 5e-8;
                s.t_end = 2e-4;
                s.dump_fields = 400;
            }
            _ => {}
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(3.0..=4.5).contains(&self.m_ratio) {
            return bad(format!("M ratio {} outside [3, 4.5]", self.m_ratio));
        }
        for nu in std::iter::once(self.nu).chain(self.nu_inclusion) {
            if !(nu > -1.0 && nu < 0.5) {
                return bad(format!("Poisson ratio {nu} outside (-1, 0.5)"));
            }
        }
        if !(0.0..=0.2).contains(&self.perturb) {
            return bad(format!("perturbation {} outside [0, 0.2]", self.perturb));
        }
        let lengths = std::iter::once(self.h).chain(self.h_list.iter().copied()).chain([self.youngs]).chain(self.youngs_inclusion);
        for v in lengths {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("non-positive size or modulus {v}"));
            }
        }
        if self.problem.is_dynamic() && !(self.dt > 0.0 && self.t_end > 0.0) {
            return bad("dynamics needs dt > 0 and t_end > 0".into());
        }
        if self.seeds == 0 {
            return bad("need at least one seed".into());
        }
        if self.particles == Some(0) {
            return bad("particle count must be positive".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec is always serializable")
    }

    pub fn from_toml(s: &str) -> Result<BenchmarkSpec> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<BenchmarkSpec> {
        BenchmarkSpec::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Compact one-line description for file headers.
    pub fn header(&self) -> String {
        serde_json::to_string(self).expect("spec is always serializable")
    }

    pub fn resolutions(&self) -> Vec<f64> {
        if self.h_list.is_empty() {
            vec![self.h]
        } else {
            self.h_list.clone()
        }
    }

    pub fn material(&self) -> Material {
        Material::plane_strain(self.youngs, self.nu)
    }
}

/// Analytic reference of a static benchmark.
#[derive(Clone, Copy, Debug)]
pub enum Reference {
    Patch(Material),
    Manufactured(Manufactured),
    Hole(Hole),
    Disk(Disk),
    Inclusion(Inclusion),
}

impl Reference {
    pub fn u(&self, x: P2) -> P2 {
        match self {
            Reference::Patch(_) => patch(x),
            Reference::Manufactured(m) => m.u(x),
            Reference::Hole(h) => h.u(x),
            Reference::Disk(d) => d.u(x),
            Reference::Inclusion(c) => c.u(x),
        }
    }

    pub fn div(&self, x: P2) -> f64 {
        match self {
            Reference::Patch(_) => PATCH_DIV,
            Reference::Manufactured(m) => m.div(x),
            Reference::Hole(h) => h.div(x),
            Reference::Disk(d) => d.div(x),
            Reference::Inclusion(c) => c.div(x),
        }
    }

    pub fn body_force(&self, x: P2) -> P2 {
        match self {
            Reference::Manufactured(m) => m.body_force(x),
            _ => P2::zeros(),
        }
    }

    /// Traction at x̄ with outward normal n.
    pub fn traction(&self, xbar: P2, n: P2) -> P2 {
        match self {
            Reference::Patch(m) => patch_stress(m) * n,
            Reference::Manufactured(m) => m.stress(xbar) * n,
            Reference::Hole(_) | Reference::Inclusion(_) => P2::zeros(),
            Reference::Disk(d) => -n * d.p0,
        }
    }
}

/// Domain, reference solution and material field of a static benchmark.
pub struct StaticCase {
    pub domain: Domain,
    pub reference: Reference,
}

impl StaticCase {
    pub fn material_at(&self, x: P2, base: Material) -> Material {
        match &self.reference {
            Reference::Inclusion(c) => c.material_at(x),
            _ => base,
        }
    }
}

pub const HOLE_RADIUS: f64 = 0.2;
pub const DISK_R0: f64 = 1.0;
pub const DISK_R1: f64 = 1.5;
pub const DISK_P0: f64 = 0.1;
pub const MANUFACTURED_A: f64 = 0.4;

pub fn static_case(spec: &BenchmarkSpec) -> Result<StaticCase> {
    let mat = spec.material();
    let half = PI / 2.0;
    let square = |kinds| Domain::rectangle("square", P2::new(-half, -half), P2::new(half, half), kinds);
    let setting_kinds = |s: u8| match s {
        1 => [Dirichlet; 4],
        2 => [Dirichlet, Dirichlet, Neumann, Dirichlet],
        _ => [Dirichlet, Neumann, Neumann, Dirichlet],
    };
    let unit = (P2::new(-0.5, -0.5), P2::new(0.5, 0.5));
    Ok(match spec.problem {
        p @ (ProblemId::Patch1 | ProblemId::Patch2 | ProblemId::Patch3) => {
            StaticCase { domain: square(setting_kinds(p.setting().unwrap())), reference: Reference::Patch(mat) }
        }
        p @ (ProblemId::Manufactured1 | ProblemId::Manufactured2 | ProblemId::Manufactured3) => StaticCase {
            domain: square(setting_kinds(p.setting().unwrap())),
            reference: Reference::Manufactured(Manufactured { a: MANUFACTURED_A, mat }),
        },
        ProblemId::Hole => StaticCase {
            domain: Domain::rectangle_with_hole("hole", unit.0, unit.1, Dirichlet, P2::zeros(), HOLE_RADIUS),
            reference: Reference::Hole(Hole { sigma0: 1.0, a: HOLE_RADIUS, mat }),
        },
        ProblemId::Disk => StaticCase {
            domain: Domain::annulus("disk", P2::zeros(), DISK_R0, DISK_R1, Neumann, Dirichlet),
            reference: Reference::Disk(Disk { p0: DISK_P0, r0: DISK_R0, r1: DISK_R1, youngs: spec.youngs, nu: spec.nu }),
        },
        ProblemId::Composite => {
            let inner = Material::plane_strain(spec.youngs_inclusion.unwrap_or(2.0 * spec.youngs), spec.nu_inclusion.unwrap_or(spec.nu));
            StaticCase {
                domain: Domain::rectangle("composite", unit.0, unit.1, [Dirichlet; 4]),
                reference: Reference::Inclusion(Inclusion { p_inf: 1.0, a: HOLE_RADIUS, inner, outer: mat }),
            }
        }
        p => return Err(Error::Config(format!("{p} is not a static benchmark"))),
    })
}

pub struct StaticOutcome {
    pub cloud: PointCloud,
    pub solution: StaticSolution,
    pub row: ConvergenceRow,
}

/// Solve a static case at one resolution and measure the errors.
pub fn solve_case(spec: &BenchmarkSpec, case: &StaticCase, h: f64, exec: Exec) -> Result<StaticOutcome> {
    let cloud = generate_grid_with(&case.domain, h, spec.m_ratio, spec.perturb, spec.seed, exec)?;
    let rule = build_rule_with(&cloud, &active_points(&cloud), exec)?;
    let mask = mask_from_domain(&cloud, &case.domain);
    let base = spec.material();
    let materials = MaterialField { points: cloud.positions.iter().map(|&x| case.material_at(x, base)).collect() };
    let r = case.reference;
    let bcs = BoundaryConditions::new(move |x| r.u(x))
        .with_body_force(move |x| r.body_force(x))
        .with_traction(move |_, xbar, n, _| r.traction(xbar, n));
    let problem = StaticProblem {
        domain: &case.domain,
        cloud: &cloud,
        rule: &rule,
        mask: &mask,
        materials: &materials,
        bcs: &bcs,
        normals: spec.normals.into(),
        time: 0.0,
    };
    let sys = assemble_with(&problem, None, exec)?;
    let mut ls = LinearSolver::new();
    ls.factor(&sys)?;
    let (x, residual) = ls.solve(&sys)?;
    let (u, theta) = unpack(&sys, &cloud, &x, &*bcs.dirichlet);
    let row = ConvergenceRow {
        h,
        delta: cloud.delta,
        err_u: l2_error(&cloud, &u, |x| r.u(x)),
        err_theta: l2_error_scalar(&cloud, &theta, |x| r.div(x)),
    };
    log::info!("{} h={h:.5} err_u={:.3e} err_theta={:.3e} residual={residual:.1e}", spec.problem, row.err_u, row.err_theta);
    Ok(StaticOutcome { cloud, solution: StaticSolution { u, theta, residual }, row })
}

/// RMS of the errors over the configured seeds at one resolution.
pub fn solve_averaged(spec: &BenchmarkSpec, case: &StaticCase, h: f64, exec: Exec) -> Result<ConvergenceRow> {
    let n = if spec.perturb > 0.0 { spec.seeds } else { 1 };
    let mut acc = ConvergenceRow { h, delta: 0.0, err_u: 0.0, err_theta: 0.0 };
    for k in 0..n {
        let mut s = spec.clone();
        s.seed = spec.seed + k;
        let r = solve_case(&s, case, h, exec)?.row;
        acc.delta = r.delta;
        acc.err_u += r.err_u * r.err_u;
        acc.err_theta += r.err_theta * r.err_theta;
    }
    acc.err_u = (acc.err_u / n as f64).sqrt();
    acc.err_theta = (acc.err_theta / n as f64).sqrt();
    Ok(acc)
}

pub fn convergence(spec: &BenchmarkSpec, exec: Exec) -> Result<ConvergenceTable> {
    spec.validate()?;
    let case = static_case(spec)?;
    convergence_study(&spec.resolutions(), |h| solve_averaged(spec, &case, h, exec))
}

/// Numerical and exact x-displacement along y = 0 for the inclusion problem
/// with stiffness ratio q = E_outer / E_inner on [−π/2, π/2]².
pub fn inclusion_profile(q: f64, radius: f64, h: f64, exec: Exec) -> Result<Vec<(f64, f64, f64)>> {
    let nu = 0.25;
    let e1 = 2.0 * (1.0 + nu);
    let inner = Material::plane_strain(e1, nu);
    let outer = Material::plane_strain(q * e1, nu);
    let half = PI / 2.0;
    let case = StaticCase {
        domain: Domain::rectangle("inclusion", P2::new(-half, -half), P2::new(half, half), [Dirichlet; 4]),
        reference: Reference::Inclusion(Inclusion { p_inf: 1.0, a: radius, inner, outer }),
    };
    let mut spec = BenchmarkSpec::for_problem(ProblemId::Composite);
    spec.youngs = q * e1;
    spec.nu = nu;
    let out = solve_case(&spec, &case, h, exec)?;
    let mut prof: Vec<(f64, f64, f64)> = out
        .cloud
        .omega_indices()
        .into_iter()
        .filter(|&i| out.cloud.positions[i].y.abs() < 0.5 * h)
        .map(|i| {
            let x = out.cloud.positions[i];
            (x.x, out.solution.u[i].x, case.reference.u(x).x)
        })
        .collect();
    prof.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(prof)
}

/// Excess total variation of the numerical profile over the exact one inside
/// `window` of the interface, relative to the local amplitude there.
pub fn profile_oscillation(profile: &[(f64, f64, f64)], radius: f64, window: f64) -> f64 {
    let near: Vec<&(f64, f64, f64)> = profile.iter().filter(|p| (p.0.abs() - radius).abs() <= window).collect();
    let tv = |k: fn(&(f64, f64, f64)) -> f64| -> f64 {
        near.windows(2).filter(|w| w[0].0.signum() == w[1].0.signum()).map(|w| (k(w[1]) - k(w[0])).abs()).sum()
    };
    let amp = near.iter().fold(0.0f64, |a, p| a.max(p.2.abs()));
    if amp == 0.0 {
        return 0.0;
    }
    (tv(|p| p.1) - tv(|p| p.2)).max(0.0) / amp
}

/// Files written by [`run`].
#[derive(Clone, Debug, Default)]
pub struct RunSummary {
    pub files: Vec<PathBuf>,
    pub table: Option<ConvergenceTable>,
    pub features: Option<dynamic::Features>,
}

/// Run a benchmark and write its artifacts into `spec.out`.
pub fn run(spec: &BenchmarkSpec, exec: Exec) -> Result<RunSummary> {
    spec.validate()?;
    std::fs::create_dir_all(&spec.out)?;
    if spec.problem.is_dynamic() {
        return dynamic::run_dynamic(spec, exec);
    }
    let case = static_case(spec)?;
    let hs = spec.resolutions();
    let table = if hs.len() == 1 {
        let row = solve_averaged(spec, &case, hs[0], exec)?;
        ConvergenceTable { rows: vec![row], slope_u: f64::NAN, slope_theta: f64::NAN }
    } else {
        convergence_study(&hs, |h| solve_averaged(spec, &case, h, exec))?
    };
    // the field file is the first seed at the finest level
    let finest = solve_case(spec, &case, hs[hs.len() - 1], exec)?;
    let conv = spec.out.join(format!("{}_convergence.csv", spec.problem));
    write_convergence_csv(&conv, &spec.header(), &table)?;
    let field = spec.out.join(format!("{}_field.csv", spec.problem));
    write_field_csv(&field, &spec.header(), &finest.cloud, &finest.solution.u, &finest.solution.theta)?;
    let files = vec![conv, field];
    Ok(RunSummary { files, table: Some(table), features: None })
}
