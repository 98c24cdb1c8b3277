//! LPS nonlocal operators as linear stencils.
//!
//! Every operator is produced as a list of `(Var, coefficient)` terms for one
//! point. Assembly turns the terms into matrix rows, and the field-level
//! evaluators below multiply them with given fields, so both paths share one
//! implementation.

use std::f64::consts::PI;

use nalgebra::{Matrix2, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::geometry::{Frame, PointCloud, P2};
use crate::quadrature::{BondMask, QuadratureRule};

pub const DIM: f64 = 2.0;
pub const C_ALPHA: f64 = 2.0;
pub const C_BETA: f64 = 16.0;
/// Moment matrices with a larger condition number are pseudo-inverted.
pub const PINV_CONDITION: f64 = 1e12;

/// Kernel K(r) = 1/r with its weighted volume m(δ) = 2πδ³/3.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Kernel {
    pub delta: f64,
    pub m: f64,
}

impl Kernel {
    pub fn new(delta: f64) -> Kernel {
        Kernel { delta, m: 2.0 * PI * delta.powi(3) / 3.0 }
    }

    pub fn k(&self, r: f64) -> f64 {
        1.0 / r
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub lambda: f64,
    pub mu: f64,
    pub rho: f64,
    pub g0: f64,
}

impl Material {
    pub fn new(lambda: f64, mu: f64) -> Material {
        Material { lambda, mu, rho: 1.0, g0: 0.0 }
    }

    /// Plane-strain Lamé parameters from Young's modulus and Poisson ratio.
    pub fn plane_strain(e: f64, nu: f64) -> Material {
        Material::new(e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu)), e / (2.0 * (1.0 + nu)))
    }

    /// Plane stress: the plane-strain λ replaced by 2λμ/(λ+2μ).
    pub fn plane_stress(e: f64, nu: f64) -> Material {
        let m = Material::plane_strain(e, nu);
        Material::new(2.0 * m.lambda * m.mu / (m.lambda + 2.0 * m.mu), m.mu)
    }

    pub fn with_density(mut self, rho: f64) -> Material {
        self.rho = rho;
        self
    }

    pub fn with_fracture_energy(mut self, g0: f64) -> Material {
        self.g0 = g0;
        self
    }

    pub fn is_admissible(&self) -> bool {
        self.mu > 0.0 && self.lambda + self.mu > 0.0
    }
}

/// Harmonic mean, exact when both arguments agree.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a == b {
        a
    } else if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// Per-point material with two-point harmonic averaging.
#[derive(Clone, Debug)]
pub struct MaterialField {
    pub points: Vec<Material>,
}

impl MaterialField {
    pub fn uniform(n: usize, m: Material) -> MaterialField {
        MaterialField { points: vec![m; n] }
    }

    pub fn at(&self, i: usize) -> &Material {
        &self.points[i]
    }

    /// (λ_ij, μ_ij).
    pub fn pair(&self, i: usize, j: usize) -> (f64, f64) {
        let a = &self.points[i];
        let b = &self.points[j];
        (harmonic_mean(a.lambda, b.lambda), harmonic_mean(a.mu, b.mu))
    }
}

/// An unknown referenced by a stencil.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Var {
    /// Displacement component `c` at point `i`.
    U(usize, usize),
    Theta(usize),
}

pub type Terms = Vec<(Var, f64)>;

/// Evaluate a stencil against point fields.
pub fn eval_terms(terms: &[(Var, f64)], u: &[P2], theta: &[f64]) -> f64 {
    terms
        .iter()
        .map(|&(v, c)| match v {
            Var::U(j, k) => c * u[j][k],
            Var::Theta(j) => c * theta[j],
        })
        .sum()
}

/// Weights of point `i` with the mask applied; `None` mask keeps every bond.
pub fn masked_weights(cloud: &PointCloud, rule: &QuadratureRule, mask: Option<&BondMask>, i: usize) -> (Vec<f64>, Vec<f64>) {
    let w = rule.of(cloud, i);
    match mask {
        None => (w.to_vec(), vec![0.0; w.len()]),
        Some(m) => w
            .iter()
            .zip(m.of(cloud, i))
            .map(|(&w, &g)| if g { (w, 0.0) } else { (0.0, w) })
            .unzip(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correction {
    pub m: Matrix2<f64>,
    pub pseudo_inverse: bool,
    /// No intact bonds at all.
    pub isolated: bool,
}

/// M_i = [(d/m) Σ K ξ⊗ξ ω̃]^{-1}, pseudo-inverted when ill-conditioned.
pub fn correction_tensor(cloud: &PointCloud, kernel: &Kernel, w_intact: &[f64], i: usize) -> Correction {
    let xi = cloud.positions[i];
    let mut s = Matrix2::zeros();
    for (&j, &w) in cloud.neighbors(i).iter().zip(w_intact) {
        if w != 0.0 {
            let xi_ = cloud.positions[j] - xi;
            s += xi_ * xi_.transpose() * (kernel.k(xi_.norm()) * w);
        }
    }
    s *= DIM / kernel.m;
    s = (s + s.transpose()) * 0.5;
    if s.iter().all(|&v| v == 0.0) {
        return Correction { m: Matrix2::zeros(), pseudo_inverse: true, isolated: true };
    }
    let eig = SymmetricEigen::new(s);
    let vals = eig.eigenvalues;
    let big = vals.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let keep = |v: f64| v > 0.0 && v * PINV_CONDITION >= big;
    if keep(vals[0]) && keep(vals[1]) {
        let m = s.try_inverse().expect("well-conditioned moment matrix");
        return Correction { m: (m + m.transpose()) * 0.5, pseudo_inverse: false, isolated: false };
    }
    let mut m = Matrix2::zeros();
    for k in 0..2 {
        if keep(vals[k]) {
            let v = eig.eigenvectors.column(k);
            m += v * v.transpose() / vals[k];
        }
    }
    Correction { m, pseudo_inverse: true, isolated: false }
}

/// θ_i = (d/m) Σ K ξᵀ M (u_j − u_i) w. Plain dilatation uses full weights and M = I.
pub fn dilatation_terms(cloud: &PointCloud, kernel: &Kernel, w: &[f64], i: usize, m: Option<&Matrix2<f64>>) -> Terms {
    let xi = cloud.positions[i];
    let mut terms = Vec::with_capacity(2 * w.len() + 2);
    let mut self_c = P2::zeros();
    for (&j, &wk) in cloud.neighbors(i).iter().zip(w) {
        if wk == 0.0 {
            continue;
        }
        let xi_ = cloud.positions[j] - xi;
        let dir = match m {
            Some(m) => m * xi_,
            None => xi_,
        };
        let c = dir * (DIM / kernel.m * kernel.k(xi_.norm()) * wk);
        terms.push((Var::U(j, 0), c.x));
        terms.push((Var::U(j, 1), c.y));
        self_c -= c;
    }
    terms.push((Var::U(i, 0), self_c.x));
    terms.push((Var::U(i, 1), self_c.y));
    terms
}

/// Momentum stencil at point `i`: the ω̃ interior sums and, with a frame,
/// the ω̂-weighted θ_i corrections of the traction operator.
pub fn momentum_terms(
    cloud: &PointCloud,
    kernel: &Kernel,
    w_intact: &[f64],
    w_broken: &[f64],
    mat: &MaterialField,
    i: usize,
    frame: Option<&Frame>,
) -> [Terms; 2] {
    let xi = cloud.positions[i];
    let mut rows: [Terms; 2] = [Vec::new(), Vec::new()];
    let mut self_u = Matrix2::zeros();
    let mut self_theta = P2::zeros();
    let inv_m = 1.0 / kernel.m;
    for (k, &j) in cloud.neighbors(i).iter().enumerate() {
        let wt = w_intact[k];
        if wt == 0.0 {
            continue;
        }
        let x = cloud.positions[j] - xi;
        let r = x.norm();
        let c = kernel.k(r) * inv_m * wt;
        let (lam, mu) = mat.pair(i, j);
        let a = x * (-C_ALPHA * (lam - mu) * c);
        self_theta += a;
        rows[0].push((Var::Theta(j), a.x));
        rows[1].push((Var::Theta(j), a.y));
        let b = x * x.transpose() * (-C_BETA * mu * c / (r * r));
        for d in 0..2 {
            rows[d].push((Var::U(j, 0), b[(d, 0)]));
            rows[d].push((Var::U(j, 1), b[(d, 1)]));
        }
        self_u -= b;
    }
    if let Some(f) = frame {
        let m = mat.at(i);
        let (n, p) = (f.n, f.p);
        for (k, &j) in cloud.neighbors(i).iter().enumerate() {
            let wh = w_broken[k];
            if wh == 0.0 {
                continue;
            }
            let x = cloud.positions[j] - xi;
            let r = x.norm();
            let c = kernel.k(r) * inv_m * wh;
            let xn = x.dot(&n);
            let xp = x.dot(&p);
            let v = x * (-2.0 * C_ALPHA * (m.lambda - m.mu))
                - n * (C_BETA * (m.lambda + 2.0 * m.mu) / 2.0 * xn * xp * xp / (r * r))
                + n * (C_BETA * m.lambda / 2.0 * xn * xn * xn / (r * r));
            self_theta += v * c;
        }
    }
    for d in 0..2 {
        rows[d].push((Var::Theta(i), self_theta[d]));
        rows[d].push((Var::U(i, 0), self_u[(d, 0)]));
        rows[d].push((Var::U(i, 1), self_u[(d, 1)]));
    }
    rows
}

/// Σ (K ω̂ / m) C_β [T_p p (ξ·n)(ξ·p)²/|ξ|² + T_n n (ξ·n)((ξ·n)² − (ξ·p)²)/(2|ξ|²)].
pub fn traction_forcing(cloud: &PointCloud, kernel: &Kernel, w_broken: &[f64], i: usize, frame: &Frame, t: P2) -> P2 {
    let xi = cloud.positions[i];
    let (n, p) = (frame.n, frame.p);
    let tp = t.dot(&p);
    let tn = t.dot(&n);
    let mut f = P2::zeros();
    for (k, &j) in cloud.neighbors(i).iter().enumerate() {
        let wh = w_broken[k];
        if wh == 0.0 {
            continue;
        }
        let x = cloud.positions[j] - xi;
        let r = x.norm();
        let c = kernel.k(r) / kernel.m * wh * C_BETA;
        let xn = x.dot(&n);
        let xp = x.dot(&p);
        f += (p * (tp * xn * xp * xp / (r * r)) + n * (tn * xn * (xn * xn - xp * xp) / (2.0 * r * r))) * c;
    }
    f
}

/// Plain dilatation at every point with weights.
pub fn dilatation(cloud: &PointCloud, rule: &QuadratureRule, u: &[P2]) -> Vec<f64> {
    let kernel = Kernel::new(cloud.delta);
    (0..cloud.len())
        .map(|i| {
            if !rule.computed[i] {
                return f64::NAN;
            }
            eval_terms(&dilatation_terms(cloud, &kernel, rule.of(cloud, i), i, None), u, &[])
        })
        .collect()
}

/// Corrected dilatation from intact weights, with the correction tensors used.
pub fn corrected_dilatation(cloud: &PointCloud, rule: &QuadratureRule, mask: &BondMask, u: &[P2]) -> (Vec<f64>, Vec<Option<Correction>>) {
    let kernel = Kernel::new(cloud.delta);
    let mut theta = vec![f64::NAN; cloud.len()];
    let mut corr = vec![None; cloud.len()];
    for i in 0..cloud.len() {
        if !rule.computed[i] {
            continue;
        }
        let (wt, _) = masked_weights(cloud, rule, Some(mask), i);
        let c = correction_tensor(cloud, &kernel, &wt, i);
        theta[i] = if c.isolated { 0.0 } else { eval_terms(&dilatation_terms(cloud, &kernel, &wt, i, Some(&c.m)), u, &[]) };
        corr[i] = Some(c);
    }
    (theta, corr)
}

/// (L u)_i with all bonds intact.
pub fn apply_interior(cloud: &PointCloud, rule: &QuadratureRule, mat: &MaterialField, u: &[P2], theta: &[f64]) -> Vec<P2> {
    let kernel = Kernel::new(cloud.delta);
    (0..cloud.len())
        .map(|i| {
            if !rule.computed[i] {
                return P2::repeat(f64::NAN);
            }
            let w = rule.of(cloud, i);
            let zero = vec![0.0; w.len()];
            let rows = momentum_terms(cloud, &kernel, w, &zero, mat, i, None);
            P2::new(eval_terms(&rows[0], u, theta), eval_terms(&rows[1], u, theta))
        })
        .collect()
}

/// (L_N u)_i at the points that have a frame.
pub fn apply_neumann(
    cloud: &PointCloud,
    rule: &QuadratureRule,
    mask: &BondMask,
    frames: &[Option<Frame>],
    mat: &MaterialField,
    u: &[P2],
    theta: &[f64],
) -> Vec<Option<P2>> {
    let kernel = Kernel::new(cloud.delta);
    (0..cloud.len())
        .map(|i| {
            let f = frames[i].as_ref()?;
            let (wt, wh) = masked_weights(cloud, rule, Some(mask), i);
            let rows = momentum_terms(cloud, &kernel, &wt, &wh, mat, i, Some(f));
            Some(P2::new(eval_terms(&rows[0], u, theta), eval_terms(&rows[1], u, theta)))
        })
        .collect()
}

/// Local Navier operator −(λ+μ)∇(∇·u) − μΔu by fourth-order central
/// differences with one Richardson step.
pub fn local_operator_oracle<F: Fn(P2) -> P2>(u: F, mat: &Material, x: P2, step: f64) -> P2 {
    let l = |s: f64| -> P2 {
        let d2 = |f: &dyn Fn(f64) -> P2| -> P2 {
            (-f(2.0 * s) + f(s) * 16.0 - f(0.0) * 30.0 + f(-s) * 16.0 - f(-2.0 * s)) / (12.0 * s * s)
        };
        let uxx = d2(&|t| u(x + P2::new(t, 0.0)));
        let uyy = d2(&|t| u(x + P2::new(0.0, t)));
        // mixed derivative from the two diagonals
        let dpp = d2(&|t| u(x + P2::new(t, t)));
        let dpm = d2(&|t| u(x + P2::new(t, -t)));
        let uxy = (dpp - dpm) / 4.0;
        let lap = uxx + uyy;
        let grad_div = P2::new(uxx.x + uxy.y, uxy.x + uyy.y);
        -(grad_div * (mat.lambda + mat.mu)) - lap * mat.mu
    };
    (l(step / 2.0) * 16.0 - l(step)) / 15.0
}
