//! Mixed boundary value problems: assembly of the 3-block system, direct
//! sparse solve, and discrete error norms.
//!
//! Unknowns are ordered `[ux over Ω, uy over Ω, θ over (Ω + collar)]`. Collar
//! displacements are known and moved to the right-hand side. The sparsity
//! pattern only depends on the neighbor lists, so matrices assembled from
//! different bond masks share one symbolic factorization.

use std::io::Write;
use std::path::Path;

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::{Argsort, Pair, SparseColMat, SymbolicSparseColMat};
use faer::Mat;

use crate::error::{Error, Result};
use crate::geometry::{estimate_frame, estimate_normal, BoundaryKind, Domain, Frame, FrameSource, PointCloud, P2};
use crate::lps::{correction_tensor, dilatation_terms, masked_weights, momentum_terms, traction_forcing, Kernel, MaterialField, Terms, Var};
use crate::par::{map_indices, try_map_indices, Exec};
use crate::quadrature::{BondMask, QuadratureRule};

/// Relative residual the direct solve must reach.
pub const RESIDUAL_TOL: f64 = 1e-10;
/// Anything worse than this after refinement is reported as a failure.
const RESIDUAL_FAIL: f64 = 1e-6;
/// In dynamics, points with more than this fraction of bonds broken drop
/// their dilatation (θ = 0) and boundary correction and keep only the
/// intact pair forces. With λ < μ the θ self-coupling of a nearly detached
/// one-sided point is a negative stiffness.
pub const DETACH_DAMAGE: f64 = 0.5;

type VecField<'a> = Box<dyn Fn(P2) -> P2 + Send + Sync + 'a>;
/// (Neumann piece if any, x̄, n, t) -> traction.
type TractionFn<'a> = Box<dyn Fn(Option<usize>, P2, P2, f64) -> P2 + Send + Sync + 'a>;

pub struct BoundaryConditions<'a> {
    pub dirichlet: VecField<'a>,
    pub body_force: VecField<'a>,
    pub traction: TractionFn<'a>,
}

impl<'a> BoundaryConditions<'a> {
    /// Zero load, zero traction, given Dirichlet data.
    pub fn new(dirichlet: impl Fn(P2) -> P2 + Send + Sync + 'a) -> Self {
        BoundaryConditions {
            dirichlet: Box::new(dirichlet),
            body_force: Box::new(|_| P2::zeros()),
            traction: Box::new(|_, _, _, _| P2::zeros()),
        }
    }

    pub fn free() -> Self {
        Self::new(|_| P2::zeros())
    }

    pub fn with_body_force(mut self, f: impl Fn(P2) -> P2 + Send + Sync + 'a) -> Self {
        self.body_force = Box::new(f);
        self
    }

    pub fn with_traction(mut self, t: impl Fn(Option<usize>, P2, P2, f64) -> P2 + Send + Sync + 'a) -> Self {
        self.traction = Box::new(t);
        self
    }
}

/// Point to unknown maps.
#[derive(Clone, Debug)]
pub struct Layout {
    pub omega: Vec<usize>,
    pub theta_points: Vec<usize>,
    u_slot: Vec<usize>,
    theta_slot: Vec<usize>,
}

impl Layout {
    pub fn new(cloud: &PointCloud, rule: &QuadratureRule) -> Result<Layout> {
        let omega = cloud.omega_indices();
        let mut u_slot = vec![usize::MAX; cloud.len()];
        for (k, &i) in omega.iter().enumerate() {
            if !rule.computed[i] {
                return Err(Error::Assembly(format!("point {i} in Ω has no quadrature weights")));
            }
            u_slot[i] = k;
        }
        let theta_points: Vec<usize> = (0..cloud.len()).filter(|&i| rule.computed[i]).collect();
        let mut theta_slot = vec![usize::MAX; cloud.len()];
        for (k, &i) in theta_points.iter().enumerate() {
            theta_slot[i] = k;
        }
        Ok(Layout { omega, theta_points, u_slot, theta_slot })
    }

    pub fn n_omega(&self) -> usize {
        self.omega.len()
    }

    pub fn n_unknowns(&self) -> usize {
        2 * self.omega.len() + self.theta_points.len()
    }

    pub fn u_col(&self, i: usize, c: usize) -> Option<usize> {
        let s = self.u_slot[i];
        (s != usize::MAX).then(|| s + c * self.omega.len())
    }

    pub fn theta_col(&self, i: usize) -> Option<usize> {
        let s = self.theta_slot[i];
        (s != usize::MAX).then(|| 2 * self.omega.len() + s)
    }

    pub fn pack(&self, u: &[P2], theta: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.n_unknowns()];
        for &i in &self.omega {
            for c in 0..2 {
                x[self.u_col(i, c).unwrap()] = u[i][c];
            }
        }
        for &i in &self.theta_points {
            x[self.theta_col(i).unwrap()] = theta[i];
        }
        x
    }
}

/// Frame at a point with broken bonds, plus the traction piece it faces.
#[derive(Clone, Copy, Debug)]
pub struct BoundaryFrame {
    pub frame: Frame,
    pub piece: Option<usize>,
}

/// Frames at every Ω point that has a broken bond. Points with no intact
/// bond at all get `None` and are handled by the caller.
pub fn build_frames(
    cloud: &PointCloud,
    domain: &Domain,
    rule: &QuadratureRule,
    mask: &BondMask,
    source: FrameSource,
    exec: Exec,
) -> Vec<Option<BoundaryFrame>> {
    map_indices(exec, cloud.len(), |i| {
        if !cloud.region[i].in_omega() || !mask.any_broken(cloud, i) {
            return None;
        }
        let x = cloud.positions[i];
        let (wt, _) = masked_weights(cloud, rule, Some(mask), i);
        let near = domain.neumann_within(x, cloud.delta);
        let piece = domain.nearest(x, BoundaryKind::Neumann).filter(|&(_, d)| d < cloud.delta).map(|(k, _)| k);
        if near.len() >= 2 {
            // corners: the estimated normal bisects the wedge, x̄ stays at x
            let f = estimate_frame(cloud, domain, i, &wt).ok()?;
            return Some(BoundaryFrame { frame: Frame::from_normal(f.n, x, FrameSource::Estimated), piece });
        }
        let frame = match (source, piece) {
            (FrameSource::Exact, Some(_)) => Frame::exact(domain, x),
            (_, Some(_)) => estimate_frame(cloud, domain, i, &wt).ok(),
            // crack faces away from the traction boundary; slivers whose intact
            // bonds cancel fall back to the direction of the broken ones
            (_, None) => estimate_frame(cloud, domain, i, &wt)
                .ok()
                .map(|f| f.n)
                .or_else(|| {
                    let (_, wh) = masked_weights(cloud, rule, Some(mask), i);
                    estimate_normal(cloud, i, &wh).ok().map(|n| -n)
                })
                .map(|n| Frame::from_normal(n, x, FrameSource::Estimated)),
        }?;
        Some(BoundaryFrame { frame, piece })
    })
}

pub struct StaticProblem<'a> {
    pub domain: &'a Domain,
    pub cloud: &'a PointCloud,
    pub rule: &'a QuadratureRule,
    pub mask: &'a BondMask,
    pub materials: &'a MaterialField,
    pub bcs: &'a BoundaryConditions<'a>,
    pub normals: FrameSource,
    pub time: f64,
}

/// Square sparse system in CSR form with a pattern fixed by the neighbor lists.
#[derive(Clone, Debug)]
pub struct LpsSystem {
    pub layout: Layout,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
    pub rhs: Vec<f64>,
    /// Points whose rows were built with the traction operator.
    pub neumann_points: Vec<usize>,
    /// Ω points without any intact bond.
    pub isolated: Vec<usize>,
}

impl LpsSystem {
    pub fn n(&self) -> usize {
        self.rhs.len()
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let s = self.row_ptr[r]..self.row_ptr[r + 1];
        (&self.cols[s.clone()], &self.vals[s])
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n())
            .map(|r| {
                let (c, v) = self.row(r);
                c.iter().zip(v).map(|(&c, &v)| v * x[c]).sum()
            })
            .collect()
    }

    /// K x − F.
    pub fn residual(&self, x: &[f64]) -> Vec<f64> {
        let mut r = self.matvec(x);
        for (r, b) in r.iter_mut().zip(&self.rhs) {
            *r -= b;
        }
        r
    }

    pub fn add_u_rhs(&mut self, i: usize, v: P2) {
        for c in 0..2 {
            if let Some(r) = self.layout.u_col(i, c) {
                self.rhs[r] += v[c];
            }
        }
    }

    /// Maximum |row − col| over the stored pattern.
    pub fn bandwidth_points(&self, cloud: &PointCloud) -> f64 {
        let mut pt = vec![0usize; self.n()];
        for &i in &self.layout.omega {
            pt[self.layout.u_col(i, 0).unwrap()] = i;
            pt[self.layout.u_col(i, 1).unwrap()] = i;
        }
        for &i in &self.layout.theta_points {
            pt[self.layout.theta_col(i).unwrap()] = i;
        }
        let mut d: f64 = 0.0;
        for r in 0..self.n() {
            for &c in self.row(r).0 {
                d = d.max((cloud.positions[pt[r]] - cloud.positions[pt[c]]).norm());
            }
        }
        d
    }
}

struct RowOut {
    entries: Vec<(usize, f64)>,
    rhs: f64,
}

fn scatter(layout: &Layout, terms: &Terms, dirichlet: &[P2]) -> Result<RowOut> {
    let mut entries = Vec::with_capacity(terms.len());
    let mut rhs = 0.0;
    for &(v, c) in terms {
        match v {
            Var::U(j, k) => match layout.u_col(j, k) {
                Some(col) => entries.push((col, c)),
                None => rhs -= c * dirichlet[j][k],
            },
            Var::Theta(j) => {
                let col = layout.theta_col(j).ok_or_else(|| Error::Assembly(format!("θ at point {j} is not an unknown")))?;
                entries.push((col, c));
            }
        }
    }
    Ok(RowOut { entries, rhs })
}

/// Structural pattern of every row, independent of the bond mask.
fn pattern(cloud: &PointCloud, layout: &Layout, exec: Exec) -> Vec<Vec<usize>> {
    let n_om = layout.n_omega();
    let mom = map_indices(exec, n_om, |k| {
        let i = layout.omega[k];
        let mut c: Vec<usize> = Vec::new();
        for j in std::iter::once(i).chain(cloud.neighbors(i).iter().copied()) {
            c.extend(layout.u_col(j, 0));
            c.extend(layout.u_col(j, 1));
            c.extend(layout.theta_col(j));
        }
        c.sort_unstable();
        c
    });
    let th = map_indices(exec, layout.theta_points.len(), |k| {
        let i = layout.theta_points[k];
        let mut c: Vec<usize> = layout.theta_col(i).into_iter().collect();
        for j in std::iter::once(i).chain(cloud.neighbors(i).iter().copied()) {
            c.extend(layout.u_col(j, 0));
            c.extend(layout.u_col(j, 1));
        }
        c.sort_unstable();
        c
    });
    let mut rows = Vec::with_capacity(layout.n_unknowns());
    rows.extend(mom.iter().cloned());
    rows.extend(mom);
    rows.extend(th);
    rows
}

pub fn assemble(p: &StaticProblem, mass: Option<&[f64]>) -> Result<LpsSystem> {
    assemble_with(p, mass, Exec::default())
}

/// Build K and F. `mass` adds a per-point diagonal to the momentum rows.
pub fn assemble_with(p: &StaticProblem, mass: Option<&[f64]>, exec: Exec) -> Result<LpsSystem> {
    let cloud = p.cloud;
    let layout = Layout::new(cloud, p.rule)?;
    let kernel = Kernel::new(cloud.delta);
    let dirichlet: Vec<P2> = map_indices(exec, cloud.len(), |i| {
        if cloud.region[i].in_omega() {
            P2::zeros()
        } else {
            (p.bcs.dirichlet)(cloud.positions[i])
        }
    });
    if let Some(j) = layout.theta_points.iter().find(|&&j| !cloud.region[j].in_omega() && !dirichlet[j].iter().all(|v| v.is_finite())) {
        return Err(Error::Assembly(format!("Dirichlet value at point {j} is not finite")));
    }
    let frames = build_frames(cloud, p.domain, p.rule, p.mask, p.normals, exec);
    let detached = |i: usize| mass.is_some() && p.mask.damage_at(cloud, i) > DETACH_DAMAGE;

    // momentum rows: (row x, row y, neumann?, isolated?)
    let mom = try_map_indices(exec, layout.n_omega(), |k| -> Result<(RowOut, RowOut, bool, bool)> {
        let i = layout.omega[k];
        let broken = p.mask.any_broken(cloud, i);
        let (wt, wh) = if broken {
            masked_weights(cloud, p.rule, Some(p.mask), i)
        } else {
            masked_weights(cloud, p.rule, None, i)
        };
        let isolated = broken && wt.iter().all(|&w| w == 0.0);
        let frame = if detached(i) { None } else { frames[i] };
        // with inertia a frameless point just loses its boundary correction
        if broken && !isolated && frame.is_none() && mass.is_none() {
            return Err(Error::FrameDegenerate(i));
        }
        if isolated && mass.is_none() {
            return Err(Error::FrameDegenerate(i));
        }
        let rows = if isolated {
            [Vec::new(), Vec::new()]
        } else {
            momentum_terms(cloud, &kernel, &wt, &wh, p.materials, i, frame.as_ref().map(|f| &f.frame))
        };
        let mut f = (p.bcs.body_force)(cloud.positions[i]);
        if let (Some(bf), false) = (frame, isolated) {
            let t = (p.bcs.traction)(bf.piece, bf.frame.xbar, bf.frame.n, p.time);
            f += traction_forcing(cloud, &kernel, &wh, i, &bf.frame, t);
        }
        let mut out = [scatter(&layout, &rows[0], &dirichlet)?, scatter(&layout, &rows[1], &dirichlet)?];
        for (c, o) in out.iter_mut().enumerate() {
            o.rhs += f[c];
            if let Some(m) = mass {
                o.entries.push((layout.u_col(i, c).unwrap(), m[i]));
            }
        }
        let [ox, oy] = out;
        Ok((ox, oy, broken && !isolated, isolated))
    })?;

    let th = try_map_indices(exec, layout.theta_points.len(), |k| -> Result<RowOut> {
        let i = layout.theta_points[k];
        let own = layout.theta_col(i).unwrap();
        let corrected = cloud.region[i].in_omega() && p.mask.any_broken(cloud, i);
        let terms = if corrected {
            let (wt, _) = masked_weights(cloud, p.rule, Some(p.mask), i);
            let c = correction_tensor(cloud, &kernel, &wt, i);
            if c.isolated || detached(i) {
                Vec::new()
            } else {
                dilatation_terms(cloud, &kernel, &wt, i, Some(&c.m))
            }
        } else {
            dilatation_terms(cloud, &kernel, p.rule.of(cloud, i), i, None)
        };
        // θ_i − Σ(...) = 0
        let neg: Terms = terms.into_iter().map(|(v, c)| (v, -c)).collect();
        let mut o = scatter(&layout, &neg, &dirichlet)?;
        o.entries.push((own, 1.0));
        Ok(o)
    })?;

    let pat = pattern(cloud, &layout, exec);
    let mut rows: Vec<RowOut> = Vec::with_capacity(layout.n_unknowns());
    let mut neumann_points = Vec::new();
    let mut isolated = Vec::new();
    let mut ys = Vec::with_capacity(mom.len());
    for (k, (x, y, nm, iso)) in mom.into_iter().enumerate() {
        if nm {
            neumann_points.push(layout.omega[k]);
        }
        if iso {
            isolated.push(layout.omega[k]);
        }
        rows.push(x);
        ys.push(y);
    }
    rows.extend(ys);
    rows.extend(th);

    let mut row_ptr = Vec::with_capacity(rows.len() + 1);
    row_ptr.push(0);
    for c in &pat {
        row_ptr.push(row_ptr.last().unwrap() + c.len());
    }
    let cols: Vec<usize> = pat.concat();
    let mut vals = vec![0.0; cols.len()];
    let mut rhs = vec![0.0; rows.len()];
    for (r, out) in rows.into_iter().enumerate() {
        let pc = &cols[row_ptr[r]..row_ptr[r + 1]];
        for (c, v) in out.entries {
            let k = pc.binary_search(&c).map_err(|_| Error::Assembly(format!("entry ({r}, {c}) outside the pattern")))?;
            vals[row_ptr[r] + k] += v;
        }
        rhs[r] = out.rhs;
    }
    Ok(LpsSystem { layout, row_ptr, cols, vals, rhs, neumann_points, isolated })
}

/// Sparse LU with a cached symbolic analysis.
#[derive(Default)]
pub struct LinearSolver {
    symbolic: Option<(SymbolicSparseColMat<usize>, Argsort<usize>, SymbolicLu<usize>, usize)>,
    lu: Option<Lu<usize, f64>>,
    pub factorizations: usize,
}

impl LinearSolver {
    pub fn new() -> LinearSolver {
        LinearSolver::default()
    }

    pub fn factor(&mut self, sys: &LpsSystem) -> Result<()> {
        let n = sys.n();
        let fresh = !matches!(&self.symbolic, Some((s, _, _, nnz)) if s.nrows() == n && *nnz == sys.nnz());
        if fresh {
            let idx: Vec<Pair<usize, usize>> = (0..n)
                .flat_map(|r| sys.row(r).0.iter().map(move |&c| Pair { row: r, col: c }))
                .collect();
            let (sym, argsort) = SymbolicSparseColMat::try_new_from_indices(n, n, &idx)
                .map_err(|e| Error::Assembly(format!("sparse pattern: {e:?}")))?;
            let slu = SymbolicLu::try_new(sym.as_ref()).map_err(|e| Error::SolveFailed(format!("symbolic LU: {e:?}")))?;
            self.symbolic = Some((sym, argsort, slu, sys.nnz()));
        }
        let (sym, argsort, slu, _) = self.symbolic.as_ref().unwrap();
        let mat = SparseColMat::new_from_argsort(sym.clone(), argsort, &sys.vals).map_err(|e| Error::SolveFailed(format!("{e:?}")))?;
        let lu = Lu::try_new_with_symbolic(slu.clone(), mat.as_ref()).map_err(|e| {
            Error::SolveFailed(format!("LU factorization failed ({e:?}); isolated points or rigid modes of an all-traction problem?"))
        })?;
        self.lu = Some(lu);
        self.factorizations += 1;
        Ok(())
    }

    fn raw_solve(&self, b: &[f64]) -> Vec<f64> {
        let lu = self.lu.as_ref().expect("factor before solve");
        let rhs = Mat::from_fn(b.len(), 1, |i, _| b[i]);
        let x = lu.solve(&rhs);
        (0..b.len()).map(|i| x[(i, 0)]).collect()
    }

    /// Solve with up to three steps of iterative refinement. Returns the
    /// solution and the relative residual ‖Kx − F‖/‖F‖.
    pub fn solve(&self, sys: &LpsSystem) -> Result<(Vec<f64>, f64)> {
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let bn = norm(&sys.rhs);
        if bn == 0.0 {
            return Ok((vec![0.0; sys.n()], 0.0));
        }
        let mut x = self.raw_solve(&sys.rhs);
        let mut rel = f64::INFINITY;
        for _ in 0..4 {
            let r = sys.residual(&x);
            rel = norm(&r) / bn;
            if !rel.is_finite() {
                return Err(Error::SolveFailed(
                    "non-finite solution; singular matrix from isolated points or rigid modes of an all-traction problem?".into(),
                ));
            }
            if rel <= RESIDUAL_TOL * 1e-2 {
                break;
            }
            let dx = self.raw_solve(&r);
            for (x, d) in x.iter_mut().zip(dx) {
                *x -= d;
            }
        }
        if rel > RESIDUAL_FAIL {
            return Err(Error::SolveFailed(format!("relative residual {rel:.3e} after refinement")));
        }
        if rel > RESIDUAL_TOL {
            log::warn!("relative residual {rel:.3e} above {RESIDUAL_TOL:e}");
        }
        Ok((x, rel))
    }
}

/// Iterative solve with θ eliminated: the θ rows read θ = b_θ − A_θu u, so
/// the momentum rows reduce to (A_uu − A_uθ A_θu) u = b_u − A_uθ b_θ, which
/// is solved by Jacobi-preconditioned GMRES. Meant for the mass-dominated
/// systems of implicit dynamics; `guess` seeds the displacement part.
/// Returns the full solution, the relative residual of the full system and
/// the iteration count.
pub fn solve_condensed(sys: &LpsSystem, guess: Option<&[f64]>, exec: Exec) -> Result<(Vec<f64>, f64, usize)> {
    let n = sys.n();
    let nu = 2 * sys.layout.n_omega();
    for r in nu..n {
        let (c, v) = sys.row(r);
        let own = c.binary_search(&r).map(|k| v[k]).unwrap_or(0.0);
        if own != 1.0 {
            return Err(Error::SolveFailed(format!("row {r} is not a θ definition")));
        }
    }
    // θ from u: θ_r = b_r − Σ_{c < nu} a_rc u_c
    let theta_of = |u: &[f64], b: Option<&[f64]>| -> Vec<f64> {
        map_indices(exec, n - nu, |k| {
            let r = nu + k;
            let (c, v) = sys.row(r);
            let mut t = b.map_or(0.0, |b| b[r]);
            for (&c, &v) in c.iter().zip(v) {
                if c < nu {
                    t -= v * u[c];
                }
            }
            t
        })
    };
    // momentum rows applied to (u, θ)
    let mom = |u: &[f64], theta: &[f64]| -> Vec<f64> {
        map_indices(exec, nu, |r| {
            let (c, v) = sys.row(r);
            c.iter().zip(v).map(|(&c, &v)| v * if c < nu { u[c] } else { theta[c - nu] }).sum()
        })
    };
    let zero = vec![0.0; nu];
    let b_theta = theta_of(&zero, Some(&sys.rhs));
    let shift = mom(&zero, &b_theta);
    let g: Vec<f64> = (0..nu).map(|r| sys.rhs[r] - shift[r]).collect();
    let diag: Vec<f64> = (0..nu)
        .map(|r| {
            let (c, v) = sys.row(r);
            c.binary_search(&r).map(|k| v[k]).unwrap_or(1.0)
        })
        .collect();
    if diag.iter().any(|&d| d == 0.0 || !d.is_finite()) {
        return Err(Error::SolveFailed("zero diagonal in a momentum row".into()));
    }
    let op = |v: &[f64], out: &mut [f64]| {
        let th = theta_of(v, None);
        out.copy_from_slice(&mom(v, &th));
    };
    let pre = |v: &[f64], out: &mut [f64]| {
        for ((o, v), d) in out.iter_mut().zip(v).zip(&diag) {
            *o = v / d;
        }
    };
    let mut u: Vec<f64> = guess.map_or_else(|| vec![0.0; nu], |x| x[..nu].to_vec());
    let out = crate::krylov::gmres(op, pre, &g, &mut u, RESIDUAL_TOL * 1e-2, 40, 2000);
    let theta = theta_of(&u, Some(&sys.rhs));
    let mut x = u;
    x.extend(theta);
    let bn = sys.rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
    let rel = if bn == 0.0 { 0.0 } else { sys.residual(&x).iter().map(|v| v * v).sum::<f64>().sqrt() / bn };
    if !out.converged && rel > RESIDUAL_FAIL {
        return Err(Error::SolveFailed(format!("GMRES stalled after {} iterations at {rel:.3e}", out.iterations)));
    }
    if rel > RESIDUAL_TOL {
        log::warn!("relative residual {rel:.3e} above {RESIDUAL_TOL:e} after {} GMRES iterations", out.iterations);
    }
    Ok((x, rel, out.iterations))
}

#[derive(Clone, Debug)]
pub struct StaticSolution {
    /// Solved on Ω, Dirichlet data on the collar, NaN elsewhere.
    pub u: Vec<P2>,
    /// Defined on Ω and the collar, NaN elsewhere.
    pub theta: Vec<f64>,
    pub residual: f64,
}

pub fn unpack(sys: &LpsSystem, cloud: &PointCloud, x: &[f64], dirichlet: &dyn Fn(P2) -> P2) -> (Vec<P2>, Vec<f64>) {
    let l = &sys.layout;
    let mut u = vec![P2::repeat(f64::NAN); cloud.len()];
    let mut theta = vec![f64::NAN; cloud.len()];
    for &i in &l.theta_points {
        theta[i] = x[l.theta_col(i).unwrap()];
        if !cloud.region[i].in_omega() {
            u[i] = dirichlet(cloud.positions[i]);
        }
    }
    for &i in &l.omega {
        u[i] = P2::new(x[l.u_col(i, 0).unwrap()], x[l.u_col(i, 1).unwrap()]);
    }
    (u, theta)
}

/// Assemble, factor and solve a static problem.
pub fn solve(p: &StaticProblem) -> Result<StaticSolution> {
    let sys = assemble(p, None)?;
    let mut ls = LinearSolver::new();
    ls.factor(&sys)?;
    let (x, residual) = ls.solve(&sys)?;
    let (u, theta) = unpack(&sys, p.cloud, &x, &*p.bcs.dirichlet);
    Ok(StaticSolution { u, theta, residual })
}

/// sqrt(Σ_Ω cell_measure |num − exact|²) for vector fields.
pub fn l2_error(cloud: &PointCloud, num: &[P2], exact: impl Fn(P2) -> P2) -> f64 {
    cloud
        .omega_indices()
        .iter()
        .map(|&i| cloud.cell_measure[i] * (num[i] - exact(cloud.positions[i])).norm_squared())
        .sum::<f64>()
        .sqrt()
}

pub fn l2_error_scalar(cloud: &PointCloud, num: &[f64], exact: impl Fn(P2) -> f64) -> f64 {
    cloud
        .omega_indices()
        .iter()
        .map(|&i| cloud.cell_measure[i] * (num[i] - exact(cloud.positions[i])).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Least-squares slope of log e against log h.
pub fn loglog_slope(h: &[f64], e: &[f64]) -> f64 {
    let n = h.len() as f64;
    let xs: Vec<f64> = h.iter().map(|v| v.ln()).collect();
    let ys: Vec<f64> = e.iter().map(|v| v.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvergenceRow {
    pub h: f64,
    pub delta: f64,
    pub err_u: f64,
    pub err_theta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    pub slope_u: f64,
    pub slope_theta: f64,
}

/// Run `run(h)` at each resolution and fit the error slopes.
pub fn convergence_study(hs: &[f64], mut run: impl FnMut(f64) -> Result<ConvergenceRow>) -> Result<ConvergenceTable> {
    if hs.len() < 2 {
        return Err(Error::Config("convergence study needs at least two resolutions".into()));
    }
    let rows = hs.iter().map(|&h| run(h)).collect::<Result<Vec<_>>>()?;
    let h: Vec<f64> = rows.iter().map(|r| r.h).collect();
    let eu: Vec<f64> = rows.iter().map(|r| r.err_u).collect();
    let et: Vec<f64> = rows.iter().map(|r| r.err_theta).collect();
    Ok(ConvergenceTable { slope_u: loglog_slope(&h, &eu), slope_theta: loglog_slope(&h, &et), rows })
}

pub fn write_convergence_csv(path: &Path, header: &str, t: &ConvergenceTable) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "# {header}")?;
    writeln!(f, "# slope_u={} slope_theta={}", t.slope_u, t.slope_theta)?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(["h", "delta", "err_u_l2", "err_theta_l2"])?;
    for r in &t.rows {
        w.write_record([r.h, r.delta, r.err_u, r.err_theta].map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_field_csv(path: &Path, header: &str, cloud: &PointCloud, u: &[P2], theta: &[f64]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "# {header}")?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(["x", "y", "ux", "uy", "theta"])?;
    for i in cloud.omega_indices() {
        let x = cloud.positions[i];
        w.write_record([x.x, x.y, u[i].x, u[i].y, theta[i]].map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::generate_grid;
    use crate::lps::Material;
    use crate::quadrature::{active_points, build_rule, mask_from_domain};
    use std::f64::consts::PI;
    use BoundaryKind::*;

    fn patch(x: P2) -> P2 {
        P2::new(3.0 * x.x + 2.0 * x.y, -x.x + 2.0 * x.y)
    }

    struct Setup {
        d: Domain,
        c: PointCloud,
        r: QuadratureRule,
        m: BondMask,
        mat: MaterialField,
    }

    fn setup(kinds: [BoundaryKind; 4], h: f64, perturb: f64) -> Setup {
        let a = PI / 2.0;
        let d = Domain::rectangle("sq", P2::new(-a, -a), P2::new(a, a), kinds);
        let c = generate_grid(&d, h, 3.5, perturb, 5).unwrap();
        let r = build_rule(&c, &active_points(&c)).unwrap();
        let m = mask_from_domain(&c, &d);
        let mat = MaterialField::uniform(c.len(), Material::plane_strain(1.0, 0.3));
        Setup { d, c, r, m, mat }
    }

    fn patch_bcs(mat: Material) -> BoundaryConditions<'static> {
        let s = nalgebra::Matrix2::new(5.0 * mat.lambda + 6.0 * mat.mu, mat.mu, mat.mu, 5.0 * mat.lambda + 4.0 * mat.mu);
        BoundaryConditions::new(patch).with_traction(move |_, _, n, _| s * n)
    }

    fn problem<'a>(s: &'a Setup, bcs: &'a BoundaryConditions<'a>, normals: FrameSource) -> StaticProblem<'a> {
        StaticProblem { domain: &s.d, cloud: &s.c, rule: &s.r, mask: &s.m, materials: &s.mat, bcs, normals, time: 0.0 }
    }

    #[test]
    fn dirichlet_patch_is_exact() {
        let s = setup([Dirichlet; 4], PI / 16.0, 0.0);
        let bcs = patch_bcs(*s.mat.at(0));
        let sol = solve(&problem(&s, &bcs, FrameSource::Estimated)).unwrap();
        assert!(l2_error(&s.c, &sol.u, patch) < 1e-10);
        assert!(l2_error_scalar(&s.c, &sol.theta, |_| 5.0) < 1e-10);
        assert!(sol.residual < RESIDUAL_TOL);
    }

    #[test]
    fn one_traction_edge_patch_is_exact() {
        let s = setup([Dirichlet, Dirichlet, Neumann, Dirichlet], PI / 16.0, 0.0);
        let bcs = patch_bcs(*s.mat.at(0));
        for normals in [FrameSource::Estimated, FrameSource::Exact] {
            let sol = solve(&problem(&s, &bcs, normals)).unwrap();
            let e = l2_error(&s.c, &sol.u, patch);
            assert!(e < 1e-10, "{normals:?}: {e}");
            assert!(l2_error_scalar(&s.c, &sol.theta, |_| 5.0) < 1e-10);
        }
    }

    #[test]
    fn rigid_motion_is_reproduced_on_perturbed_grid() {
        let s = setup([Dirichlet; 4], PI / 16.0, 0.2);
        let rigid = |x: P2| P2::new(0.3 - 0.2 * x.y, -0.1 + 0.2 * x.x);
        let bcs = BoundaryConditions::new(rigid);
        let sol = solve(&problem(&s, &bcs, FrameSource::Estimated)).unwrap();
        for i in s.c.omega_indices() {
            assert!((sol.u[i] - rigid(s.c.positions[i])).norm() < 1e-9);
            assert!(sol.theta[i].abs() < 1e-9);
        }
    }

    #[test]
    fn dirichlet_problem_has_no_traction_rows() {
        let s = setup([Dirichlet; 4], PI / 8.0, 0.0);
        let bcs = BoundaryConditions::free();
        let sys = assemble(&problem(&s, &bcs, FrameSource::Estimated), None).unwrap();
        assert!(sys.neumann_points.is_empty());
        assert_eq!(sys.n(), 2 * s.c.omega_indices().len() + sys.layout.theta_points.len());
        // θ couples to θ_j, which couples to u over another horizon
        assert!(sys.bandwidth_points(&s.c) <= s.c.delta * (1.0 + 1e-9));
    }

    #[test]
    fn pattern_is_independent_of_mask() {
        let s = setup([Dirichlet, Dirichlet, Neumann, Dirichlet], PI / 8.0, 0.1);
        let bcs = patch_bcs(*s.mat.at(0));
        let a = assemble(&problem(&s, &bcs, FrameSource::Estimated), None).unwrap();
        let mut cut = s.m.clone();
        let rev = s.c.reverse_bonds();
        let i = (0..s.c.len()).min_by(|&a, &b| s.c.positions[a].norm().total_cmp(&s.c.positions[b].norm())).unwrap();
        for b in s.c.bonds(i).filter(|&b| s.c.positions[s.c.nbr_idx[b]].y > 0.0) {
            cut.gamma[b] = false;
            cut.gamma[rev[b]] = false;
        }
        let mut p = problem(&s, &bcs, FrameSource::Estimated);
        p.mask = &cut;
        let b = assemble(&p, None).unwrap();
        assert_eq!(a.cols, b.cols);
        assert_eq!(a.row_ptr, b.row_ptr);
        assert_ne!(a.vals, b.vals);
    }

    #[test]
    fn single_interior_row_matches_hand_stencil() {
        let s = setup([Dirichlet; 4], PI / 8.0, 0.0);
        let bcs = BoundaryConditions::free();
        let sys = assemble(&problem(&s, &bcs, FrameSource::Estimated), None).unwrap();
        let i = s.c.positions.iter().position(|p| p.norm() < 1e-12).unwrap();
        let l = &sys.layout;
        let kernel = Kernel::new(s.c.delta);
        let mat = s.mat.at(i);
        let w = s.r.of(&s.c, i);
        let row = l.u_col(i, 0).unwrap();
        let (cols, vals) = sys.row(row);
        let get = |c: usize| cols.iter().position(|&x| x == c).map(|k| vals[k]).unwrap_or(0.0);
        for (k, &j) in s.c.neighbors(i).iter().enumerate() {
            let xi = s.c.positions[j] - s.c.positions[i];
            let r = xi.norm();
            let c = w[k] / (r * kernel.m);
            let exp_theta = -2.0 * (mat.lambda - mat.mu) * xi.x * c;
            let exp_uxx = -16.0 * mat.mu * xi.x * xi.x / (r * r) * c;
            assert!((get(l.theta_col(j).unwrap()) - exp_theta).abs() < 1e-12);
            if let Some(cj) = l.u_col(j, 0) {
                assert!((get(cj) - exp_uxx).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn slope_fit() {
        let h = [0.4, 0.2, 0.1];
        let e: Vec<f64> = h.iter().map(|h| 3.0 * h * h).collect();
        assert!((loglog_slope(&h, &e) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn l2_of_constant_offset() {
        let s = setup([Dirichlet; 4], PI / 32.0, 0.0);
        let u = vec![P2::new(0.5, 0.0); s.c.len()];
        let e = l2_error(&s.c, &u, |_| P2::zeros());
        // Ω is π×π plus a half-cell rim from the boundary rows
        let area = s.c.omega_indices().iter().map(|&i| s.c.cell_measure[i]).sum::<f64>();
        assert!((e - 0.5 * area.sqrt()).abs() < 1e-12);
        assert!((area.sqrt() - PI).abs() < 2.0 * s.c.h);
        assert_eq!(l2_error(&s.c, &u, |_| P2::new(0.5, 0.0)), 0.0);
    }
}
