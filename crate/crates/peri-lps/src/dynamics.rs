//! Implicit dynamics with bond breaking.
//!
//! Each step solves the average-acceleration Newmark system, checks every
//! intact bond against the critical stretch, breaks all bonds over the
//! threshold at once and re-solves until nothing new breaks. The quadrature
//! weights stay fixed for the whole run; only the mask changes. The default
//! step solver is restarted GMRES on the dilatation-condensed system, which
//! needs no refactoring after a break; a direct LU path is kept for checks.

use std::f64::consts::PI;

use petgraph::unionfind::UnionFind;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Domain, FrameSource, PointCloud, P2};
use crate::lps::{Material, MaterialField};
use crate::par::{map_indices, Exec};
use crate::quadrature::{BondMask, QuadratureRule};
use crate::static_solver::{assemble_with, solve_condensed, unpack, BoundaryConditions, LinearSolver, StaticProblem};

/// Damage above which a point counts as cracked.
pub const CRACK_THRESHOLD: f64 = 0.35;
pub const DEFAULT_SUBITERATION_CAP: usize = 50;

/// Critical stretch s₀ = sqrt(G₀ / (4(λ−μ)β′ + 8μβ)).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FractureCriterion {
    pub s0: f64,
    pub beta: f64,
    pub beta_prime: f64,
}

impl FractureCriterion {
    pub fn new(mat: &Material, delta: f64) -> Result<FractureCriterion> {
        let beta = 3.0 * delta / (4.0 * PI);
        let beta_prime = 0.23873 * delta;
        let radicand = 4.0 * (mat.lambda - mat.mu) * beta_prime + 8.0 * mat.mu * beta;
        if !(radicand > 0.0) || !(mat.g0 >= 0.0) {
            return Err(Error::CriterionInvalid(radicand));
        }
        Ok(FractureCriterion { s0: (mat.g0 / radicand).sqrt(), beta, beta_prime })
    }

    /// Bonds never break.
    pub fn unbreakable() -> FractureCriterion {
        FractureCriterion { s0: f64::INFINITY, beta: 0.0, beta_prime: 0.0 }
    }
}

pub fn critical_stretch(mat: &Material, delta: f64) -> Result<f64> {
    FractureCriterion::new(mat, delta).map(|c| c.s0)
}

/// s_ij = (|u_j − u_i + x_j − x_i| − |x_j − x_i|) / |x_j − x_i|.
pub fn bond_strain(cloud: &PointCloud, u: &[P2], i: usize, j: usize) -> f64 {
    let xi = cloud.positions[j] - cloud.positions[i];
    let r = xi.norm();
    ((u[j] - u[i] + xi).norm() - r) / r
}

fn in_body(cloud: &PointCloud, j: usize) -> bool {
    cloud.region[j].in_omega()
}

/// φ_i: fraction of broken bonds to Ω points. Zero outside Ω.
pub fn damage(cloud: &PointCloud, mask: &BondMask) -> Vec<f64> {
    (0..cloud.len()).map(|i| mask.damage_at(cloud, i)).collect()
}

/// Kinematic state plus the bond mask at time `t`.
#[derive(Clone, Debug)]
pub struct FractureState {
    pub u: Vec<P2>,
    pub v: Vec<P2>,
    pub a: Vec<P2>,
    pub theta: Vec<f64>,
    pub mask: BondMask,
    pub t: f64,
    pub step: usize,
}

impl FractureState {
    /// Zero fields at t = 0.
    pub fn at_rest(cloud: &PointCloud, mask: BondMask) -> FractureState {
        let n = cloud.len();
        FractureState {
            u: vec![P2::zeros(); n],
            v: vec![P2::zeros(); n],
            a: vec![P2::zeros(); n],
            theta: vec![0.0; n],
            mask,
            t: 0.0,
            step: 0,
        }
    }

    pub fn damage(&self, cloud: &PointCloud) -> Vec<f64> {
        damage(cloud, &self.mask)
    }

    /// Broken bonds between Ω points, each pair counted once.
    pub fn broken_bonds(&self, cloud: &PointCloud) -> usize {
        (0..cloud.len())
            .filter(|&i| in_body(cloud, i))
            .map(|i| {
                cloud
                    .bonds(i)
                    .zip(cloud.neighbors(i))
                    .filter(|&(k, &j)| j > i && in_body(cloud, j) && !self.mask.gamma[k])
                    .count()
            })
            .sum()
    }
}

/// Linear solver used inside a step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSolver {
    /// Sparse LU, refactored after every break.
    Direct,
    /// GMRES on the θ-condensed system; no factorization at all.
    #[default]
    Krylov,
}

pub struct DynamicProblem<'a> {
    pub domain: &'a Domain,
    pub cloud: &'a PointCloud,
    pub rule: &'a QuadratureRule,
    pub materials: &'a MaterialField,
    /// Loads are evaluated at the end of each step.
    pub bcs: &'a BoundaryConditions<'a>,
    pub normals: FrameSource,
    pub dt: f64,
    pub criterion: FractureCriterion,
    pub subiteration_cap: usize,
    pub solver: StepSolver,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepReport {
    /// Solves in this step; 1 when nothing broke.
    pub solves: usize,
    pub newly_broken: usize,
    pub residual: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStats {
    pub steps: usize,
    pub solves: usize,
    pub factorizations: usize,
    pub krylov_iterations: usize,
}

/// Newmark stepper owning the factorization cache.
pub struct Integrator<'a> {
    pub problem: DynamicProblem<'a>,
    exec: Exec,
    mass: Vec<f64>,
    reverse: Vec<usize>,
    solver: LinearSolver,
    stale: bool,
    rule_fingerprint: u64,
    pub stats: RunStats,
}

impl<'a> Integrator<'a> {
    pub fn new(problem: DynamicProblem<'a>, exec: Exec) -> Result<Integrator<'a>> {
        if !(problem.dt > 0.0) {
            return Err(Error::Config(format!("time step must be positive, got {}", problem.dt)));
        }
        let c = 4.0 / (problem.dt * problem.dt);
        let mass = problem.materials.points.iter().map(|m| c * m.rho).collect();
        let reverse = problem.cloud.reverse_bonds();
        let rule_fingerprint = problem.rule.fingerprint();
        Ok(Integrator { problem, exec, mass, reverse, solver: LinearSolver::new(), stale: true, rule_fingerprint, stats: RunStats::default() })
    }

    pub fn rule_fingerprint(&self) -> u64 {
        self.rule_fingerprint
    }

    /// Intact bonds stretched beyond s₀, both slots of each pair.
    fn over_threshold(&self, mask: &BondMask, u: &[P2]) -> Vec<usize> {
        let cloud = self.problem.cloud;
        let s0 = self.problem.criterion.s0;
        if !s0.is_finite() {
            return Vec::new();
        }
        let per_point = map_indices(self.exec, cloud.len(), |i| {
            if !in_body(cloud, i) {
                return Vec::new();
            }
            cloud
                .bonds(i)
                .zip(cloud.neighbors(i))
                .filter(|&(k, &j)| j > i && mask.gamma[k] && u[j].iter().all(|v| v.is_finite()))
                .filter(|&(_, &j)| bond_strain(cloud, u, i, j) > s0)
                .map(|(k, _)| k)
                .collect::<Vec<usize>>()
        });
        let mut out = Vec::new();
        for k in per_point.into_iter().flatten() {
            out.push(k);
            out.push(self.reverse[k]);
        }
        out
    }

    /// Advance one step with fracture subiterations.
    pub fn step(&mut self, s: &mut FractureState) -> Result<StepReport> {
        let p = &self.problem;
        let cloud = p.cloud;
        let dt = p.dt;
        let t1 = s.t + dt;
        let step = s.step + 1;
        let predictor: Vec<P2> = (0..cloud.len()).map(|i| s.u[i] + s.v[i] * dt + s.a[i] * (dt * dt / 4.0)).collect();
        let mut mask = s.mask.clone();
        let mut report = StepReport::default();
        for _ in 0..p.subiteration_cap {
            let sp = StaticProblem {
                domain: p.domain,
                cloud,
                rule: p.rule,
                mask: &mask,
                materials: p.materials,
                bcs: p.bcs,
                normals: p.normals,
                time: t1,
            };
            let mut sys = assemble_with(&sp, Some(&self.mass), self.exec)?;
            for &i in &sys.layout.omega.clone() {
                sys.add_u_rhs(i, predictor[i] * self.mass[i]);
            }
            let tag = |e: Error| Error::SolveFailed(format!("step {step}: {e}"));
            let (x, rel) = match p.solver {
                StepSolver::Direct => {
                    if self.stale {
                        self.solver.factor(&sys)?;
                        self.stale = false;
                    }
                    self.solver.solve(&sys).map_err(tag)?
                }
                StepSolver::Krylov => {
                    let guess = sys.layout.pack(&predictor, &s.theta);
                    let (x, rel, iters) = solve_condensed(&sys, Some(&guess), self.exec).map_err(tag)?;
                    self.stats.krylov_iterations += iters;
                    (x, rel)
                }
            };
            report.solves += 1;
            report.residual = rel;
            let (u, theta) = unpack(&sys, cloud, &x, &*p.bcs.dirichlet);
            let broken = self.over_threshold(&mask, &u);
            if broken.is_empty() {
                self.commit(s, u, theta, mask, t1);
                self.stats.steps += 1;
                self.stats.solves += report.solves;
                self.stats.factorizations = self.solver.factorizations;
                return Ok(report);
            }
            for k in broken {
                if mask.gamma[k] {
                    mask.gamma[k] = false;
                    report.newly_broken += 1;
                }
            }
            self.stale = true;
        }
        Err(Error::SubiterationDiverged { step, cap: p.subiteration_cap })
    }

    fn commit(&self, s: &mut FractureState, u: Vec<P2>, theta: Vec<f64>, mask: BondMask, t1: f64) {
        let dt = self.problem.dt;
        let c = 4.0 / (dt * dt);
        for i in 0..u.len() {
            if !u[i].iter().all(|v| v.is_finite()) {
                continue;
            }
            let a1 = (u[i] - s.u[i] - s.v[i] * dt) * c - s.a[i];
            s.v[i] += (s.a[i] + a1) * (dt / 2.0);
            s.a[i] = a1;
            s.u[i] = u[i];
        }
        s.theta = theta;
        s.mask = mask;
        s.t = t1;
        s.step += 1;
        debug_assert_eq!(self.problem.rule.fingerprint(), self.rule_fingerprint, "quadrature weights changed during a run");
    }
}

/// Components of the intact-bond graph over Ω: (large, small). Components
/// holding at least 1% of the points are large; singletons are ignored.
pub fn count_fragments(cloud: &PointCloud, mask: &BondMask) -> (usize, usize) {
    let n = cloud.len();
    let mut uf = UnionFind::<usize>::new(n);
    let mut total = 0usize;
    for i in 0..n {
        if !in_body(cloud, i) {
            continue;
        }
        total += 1;
        for (k, &j) in cloud.bonds(i).zip(cloud.neighbors(i)) {
            if j > i && mask.gamma[k] && in_body(cloud, j) {
                uf.union(i, j);
            }
        }
    }
    let mut sizes = std::collections::HashMap::new();
    for i in (0..n).filter(|&i| in_body(cloud, i)) {
        *sizes.entry(uf.find(i)).or_insert(0usize) += 1;
    }
    let cut = total as f64 * 0.01;
    let large = sizes.values().filter(|&&s| s as f64 >= cut && s > 1).count();
    let small = sizes.values().filter(|&&s| (s as f64) < cut && s > 1).count();
    (large, small)
}

/// Damage field at one instant.
#[derive(Clone, Debug)]
pub struct DamageSnapshot {
    pub t: f64,
    pub damage: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct FeatureParams {
    pub threshold: f64,
    /// Consecutive lattice columns that must show two separate crack
    /// crossings before a split counts as a branch.
    pub min_columns: usize,
    /// Undamaged cells needed between two crossings of one column.
    pub min_gap: i64,
    /// Tip positions per branch used for the angle fit.
    pub fit_points: usize,
    /// Tip samples per least-squares speed fit. One lattice cell per sample
    /// interval is a coarse speed quantum, so the maximum is taken over fits.
    pub speed_window: usize,
}

impl Default for FeatureParams {
    fn default() -> Self {
        FeatureParams { threshold: CRACK_THRESHOLD, min_columns: 3, min_gap: 2, fit_points: 20, speed_window: 5 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Branching {
    pub time: f64,
    pub x: f64,
    pub y: f64,
    /// Angle between the two branch lines, degrees.
    pub angle_deg: f64,
    /// Snapshot time at which two branches were first separated.
    pub detected_at: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CrackFeatures {
    /// (t, x, y) of the crack tip per snapshot with damage.
    pub tips: Vec<[f64; 3]>,
    /// (t, v) from consecutive tip x positions.
    pub speeds: Vec<[f64; 2]>,
    /// (t, v) from sliding least-squares fits of tip x against time.
    pub fitted_speeds: Vec<[f64; 2]>,
    /// Largest fitted speed, or the largest raw one if there are too few tips.
    pub max_speed: Option<f64>,
    pub branching: Option<Branching>,
}

/// 8-connected components of a point set on the reference lattice.
fn lattice_components(cloud: &PointCloud, pts: &[usize]) -> Vec<Vec<usize>> {
    let index: std::collections::HashMap<[i64; 2], usize> = pts.iter().enumerate().map(|(k, &i)| (cloud.lattice[i], k)).collect();
    let mut uf = UnionFind::<usize>::new(pts.len());
    for (k, &i) in pts.iter().enumerate() {
        let [a, b] = cloud.lattice[i];
        for (da, db) in [(1, -1), (1, 0), (1, 1), (0, 1)] {
            if let Some(&l) = index.get(&[a + da, b + db]) {
                uf.union(k, l);
            }
        }
    }
    let mut groups: std::collections::HashMap<usize, Vec<usize>> = std::collections::HashMap::new();
    for (k, &i) in pts.iter().enumerate() {
        groups.entry(uf.find(k)).or_default().push(i);
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().collect();
    out.sort_by_key(|g| std::cmp::Reverse(g.len()));
    out
}

fn tip_of(cloud: &PointCloud, pts: &[usize]) -> Option<P2> {
    pts.iter().map(|&i| cloud.positions[i]).max_by(|a, b| a.x.total_cmp(&b.x))
}

/// Least-squares line through the points: (centroid, angle).
fn fit_line(pts: &[P2]) -> Option<(P2, f64)> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let m = pts.iter().sum::<P2>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.x - m.x).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.x - m.x) * (p.y - m.y)).sum();
    let syy: f64 = pts.iter().map(|p| (p.y - m.y).powi(2)).sum();
    // principal direction, so vertical branches are fine too
    Some((m, 0.5 * (2.0 * sxy).atan2(sxx - syy)))
}

fn intersect(a: (P2, f64), b: (P2, f64)) -> Option<P2> {
    let da = P2::new(a.1.cos(), a.1.sin());
    let db = P2::new(b.1.cos(), b.1.sin());
    let det = da.x * (-db.y) - da.y * (-db.x);
    if det.abs() < 1e-9 {
        return None;
    }
    let r = b.0 - a.0;
    let s = (r.x * (-db.y) - r.y * (-db.x)) / det;
    Some(a.0 + da * s)
}

/// Crack tip, speed and branching from damage snapshots of a crack running
/// towards +x. Only damage connected to the first snapshot's damage is
/// followed when there is any, so isolated specks ahead of the crack do not
/// count as the tip.
pub fn extract_crack_features(cloud: &PointCloud, snaps: &[DamageSnapshot], params: &FeatureParams) -> CrackFeatures {
    let damaged = |s: &DamageSnapshot| -> Vec<usize> {
        (0..cloud.len()).filter(|&i| in_body(cloud, i) && s.damage[i] > params.threshold).collect()
    };
    let seed: std::collections::HashSet<usize> = snaps.first().map(|s| damaged(s).into_iter().collect()).unwrap_or_default();
    let crack = |s: &DamageSnapshot| -> Vec<usize> {
        let d = damaged(s);
        if seed.is_empty() {
            return d;
        }
        lattice_components(cloud, &d).into_iter().filter(|g| g.iter().any(|i| seed.contains(i))).flatten().collect()
    };
    let mut f = CrackFeatures::default();
    let mut sets = Vec::with_capacity(snaps.len());
    for s in snaps {
        let c = crack(s);
        if let Some(tip) = tip_of(cloud, &c) {
            f.tips.push([s.t, tip.x, tip.y]);
        }
        sets.push(c);
    }
    for w in f.tips.windows(2) {
        let dt = w[1][0] - w[0][0];
        if dt > 0.0 {
            f.speeds.push([w[1][0], (w[1][1] - w[0][1]) / dt]);
        }
    }
    let w = params.speed_window.max(2);
    for win in f.tips.windows(w) {
        let n = w as f64;
        let (mt, mx) = (win.iter().map(|t| t[0]).sum::<f64>() / n, win.iter().map(|t| t[1]).sum::<f64>() / n);
        let stt: f64 = win.iter().map(|t| (t[0] - mt).powi(2)).sum();
        if stt > 0.0 {
            let v = win.iter().map(|t| (t[0] - mt) * (t[1] - mx)).sum::<f64>() / stt;
            f.fitted_speeds.push([mt, v]);
        }
    }
    let top = |v: &[[f64; 2]]| v.iter().map(|v| v[1]).reduce(f64::max);
    f.max_speed = top(&f.fitted_speeds).or_else(|| top(&f.speeds));

    for (k, c) in sets.iter().enumerate() {
        if let Some(col) = first_split(cloud, c, params) {
            f.branching = branch_geometry(cloud, &sets[k..], snaps[k].t, col, &f.tips, params);
            break;
        }
    }
    f
}

/// Runs of damaged rows in each lattice column, separated by at least
/// `min_gap` undamaged rows.
fn column_runs(cloud: &PointCloud, pts: &[usize], min_gap: i64) -> std::collections::BTreeMap<i64, Vec<(i64, i64)>> {
    let mut cols: std::collections::BTreeMap<i64, Vec<i64>> = std::collections::BTreeMap::new();
    for &i in pts {
        let [a, b] = cloud.lattice[i];
        cols.entry(a).or_default().push(b);
    }
    cols.into_iter()
        .map(|(a, mut rows)| {
            rows.sort_unstable();
            let mut runs: Vec<(i64, i64)> = Vec::new();
            for r in rows {
                match runs.last_mut() {
                    Some(last) if r - last.1 <= min_gap => last.1 = r,
                    _ => runs.push((r, r)),
                }
            }
            (a, runs)
        })
        .collect()
}

/// First lattice column of a stretch of at least `min_columns` adjacent
/// columns that each cross the crack twice or more.
fn first_split(cloud: &PointCloud, pts: &[usize], params: &FeatureParams) -> Option<i64> {
    let runs = column_runs(cloud, pts, params.min_gap);
    let mut start: Option<i64> = None;
    let mut prev: Option<i64> = None;
    for (&a, r) in &runs {
        let split = r.len() >= 2;
        let contiguous = prev == Some(a - 1);
        if split {
            if start.is_none() || !contiguous {
                start = Some(a);
            }
            if a - start.unwrap() + 1 >= params.min_columns as i64 {
                return start;
            }
        } else {
            start = None;
        }
        prev = Some(a);
    }
    None
}

/// Fork location, branch time and angle once a split is seen. The fork
/// starts at the last single-crossing column before the split and is
/// refined by intersecting lines fit to the tips of the two arms.
fn branch_geometry(
    cloud: &PointCloud,
    sets: &[Vec<usize>],
    detected_at: f64,
    split_col: i64,
    tips: &[[f64; 3]],
    params: &FeatureParams,
) -> Option<Branching> {
    let c = &sets[0];
    let stem: Vec<P2> = c.iter().filter(|&&i| cloud.lattice[i][0] == split_col - 1).map(|&i| cloud.positions[i]).collect();
    let xb = c.iter().filter(|&&i| cloud.lattice[i][0] == split_col).map(|&i| cloud.positions[i].x).sum::<f64>()
        / c.iter().filter(|&&i| cloud.lattice[i][0] == split_col).count().max(1) as f64;
    let yb = if stem.is_empty() { 0.0 } else { stem.iter().map(|p| p.y).sum::<f64>() / stem.len() as f64 };
    let fork = P2::new(xb - 0.5 * cloud.h, yb);

    // arm tips: farthest damaged point above and below the stem line
    let mut upper = Vec::new();
    let mut lower = Vec::new();
    for set in sets.iter().take(params.fit_points) {
        let side = |sign: f64| {
            set.iter()
                .map(|&i| cloud.positions[i])
                .filter(|p| p.x > fork.x && sign * (p.y - fork.y) > cloud.h)
                .max_by(|a, b| a.x.total_cmp(&b.x))
        };
        if let (Some(u), Some(l)) = (side(1.0), side(-1.0)) {
            upper.push(u);
            lower.push(l);
        }
    }
    // with a single tip per branch the line runs through the fork
    let with_fork = |v: &[P2]| -> Vec<P2> {
        let mut v = v.to_vec();
        v.dedup_by(|a, b| (*a - *b).norm() < 1e-12);
        if v.len() < 2 {
            std::iter::once(fork).chain(v).collect()
        } else {
            v
        }
    };
    let a = fit_line(&with_fork(&upper))?;
    let b = fit_line(&with_fork(&lower))?;
    let mut angle = (a.1 - b.1).abs().to_degrees();
    if angle > 90.0 {
        angle = 180.0 - angle;
    }
    // wide arms stay connected for several cells past the true fork, so the
    // intersection may sit well behind the split but never ahead of it
    let fork = match intersect(a, b) {
        Some(q) if q.x <= fork.x + cloud.h && fork.x - q.x < 10.0 * cloud.h && (q.y - fork.y).abs() < 2.0 * cloud.h => q,
        _ => fork,
    };
    let time = tips.iter().find(|t| t[1] >= fork.x).map_or(detected_at, |t| t[0]);
    Some(Branching { time, x: fork.x, y: fork.y, angle_deg: angle, detected_at })
}
