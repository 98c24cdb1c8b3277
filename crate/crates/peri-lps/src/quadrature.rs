//! Optimization-based quadrature over δ-balls and the intact/broken bond split.
//!
//! Weights are the minimum-norm solution of `B ω = g`, where row k of `B`
//! evaluates basis member k at the bond vectors and `g_k` is its exact ball
//! moment. Members are `(ξ1/δ)^a (ξ2/δ)^b (δ/|ξ|)^3` with `2 <= a+b <= 5`,
//! which keeps the rows O(1) regardless of δ.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::{Domain, PointCloud, Region, P2};
use crate::par::{try_map_indices, Exec};

/// Exponent pairs of the reproducing basis, degrees 2 through 5.
pub const BASIS: [(u32, u32); 18] = [
    (2, 0), (1, 1), (0, 2),
    (3, 0), (2, 1), (1, 2), (0, 3),
    (4, 0), (3, 1), (2, 2), (1, 3), (0, 4),
    (5, 0), (4, 1), (3, 2), (2, 3), (1, 4), (0, 5),
];

/// Singular values below this fraction of the largest are dropped.
pub const SVD_CUTOFF: f64 = 1e-10;
/// Accepted relative residual of the moment equations.
pub const RESIDUAL_TOL: f64 = 1e-9;

fn double_factorial(n: i64) -> f64 {
    let mut r = 1.0;
    let mut k = n;
    while k > 1 {
        r *= k as f64;
        k -= 2;
    }
    r
}

fn angular_factor(a: u32, b: u32) -> f64 {
    if a % 2 == 1 || b % 2 == 1 {
        return 0.0;
    }
    2.0 * PI * double_factorial(a as i64 - 1) * double_factorial(b as i64 - 1) / double_factorial((a + b) as i64)
}

/// ∫_{B_δ(0)} y1^a y2^b / |y|^3 dy.
pub fn exact_ball_moment(a: u32, b: u32, delta: f64) -> Result<f64> {
    if a + b < 2 {
        return Err(Error::NonIntegrable { a, b });
    }
    let p = (a + b) as i32;
    Ok(angular_factor(a, b) * delta.powi(p - 1) / (p - 1) as f64)
}

/// Moment of the δ-scaled member.
pub fn scaled_ball_moment(a: u32, b: u32, delta: f64) -> Result<f64> {
    if a + b < 2 {
        return Err(Error::NonIntegrable { a, b });
    }
    Ok(angular_factor(a, b) * delta * delta / (a + b - 1) as f64)
}

/// Scaled basis member evaluated at bond vector `xi`.
pub fn basis_value(a: u32, b: u32, xi: P2, delta: f64) -> f64 {
    let r = xi.norm();
    (xi.x / delta).powi(a as i32) * (xi.y / delta).powi(b as i32) * (delta / r).powi(3)
}

pub fn constraint_matrix(offsets: &[P2], delta: f64) -> DMatrix<f64> {
    DMatrix::from_fn(BASIS.len(), offsets.len(), |k, j| {
        let (a, b) = BASIS[k];
        basis_value(a, b, offsets[j], delta)
    })
}

pub fn moment_vector(delta: f64) -> DVector<f64> {
    DVector::from_iterator(
        BASIS.len(),
        BASIS.iter().map(|&(a, b)| scaled_ball_moment(a, b, delta).unwrap()),
    )
}

/// Minimum-norm weights for one stencil of bond vectors, or `None` if the moments cannot be matched.
pub fn solve_stencil(offsets: &[P2], delta: f64) -> Option<Vec<f64>> {
    if offsets.len() < BASIS.len() {
        return None;
    }
    let b = constraint_matrix(offsets, delta);
    let g = moment_vector(delta);
    let fb = faer::Mat::from_fn(b.nrows(), b.ncols(), |i, j| b[(i, j)]);
    let svd = fb.thin_svd().ok()?;
    let (u, s, v) = (svd.U(), svd.S(), svd.V());
    let sv: Vec<f64> = (0..s.dim()).map(|k| s[k]).collect();
    let smax = sv.iter().fold(0.0f64, |a, &x| a.max(x));
    if !(smax > 0.0) {
        return None;
    }
    let pinv = |rhs: &DVector<f64>| -> DVector<f64> {
        let mut w = DVector::zeros(offsets.len());
        for (k, &sk) in sv.iter().enumerate() {
            if sk > SVD_CUTOFF * smax {
                let c = (0..rhs.len()).map(|r| u[(r, k)] * rhs[r]).sum::<f64>() / sk;
                for j in 0..w.len() {
                    w[j] += v[(j, k)] * c;
                }
            }
        }
        w
    };
    let mut w = pinv(&g);
    w += pinv(&(&g - &b * &w));
    let res = (&b * &w - &g).norm();
    if res > RESIDUAL_TOL * g.norm() {
        return None;
    }
    Some(w.iter().copied().collect())
}

/// Per-point weights aligned with the cloud's neighbor slots.
#[derive(Clone, Debug)]
pub struct QuadratureRule {
    pub weights: Vec<f64>,
    /// Which points had their stencil solved.
    pub computed: Vec<bool>,
    pub delta: f64,
}

impl QuadratureRule {
    pub fn of(&self, cloud: &PointCloud, i: usize) -> &[f64] {
        &self.weights[cloud.bonds(i)]
    }

    /// Fraction of negative weights at point `i`.
    pub fn negative_fraction(&self, cloud: &PointCloud, i: usize) -> f64 {
        let w = self.of(cloud, i);
        if w.is_empty() {
            return 0.0;
        }
        w.iter().filter(|&&x| x < 0.0).count() as f64 / w.len() as f64
    }

    /// Stable fingerprint of the weights, used to check they never change during a run.
    pub fn fingerprint(&self) -> u64 {
        let mut hsh: u64 = 0xcbf29ce484222325;
        for w in &self.weights {
            for byte in w.to_bits().to_le_bytes() {
                hsh ^= byte as u64;
                hsh = hsh.wrapping_mul(0x100000001b3);
            }
        }
        hsh
    }
}

/// Weights at point `i` of the cloud.
pub fn solve_weights(cloud: &PointCloud, i: usize) -> Result<Vec<f64>> {
    let xi = cloud.positions[i];
    let offsets: Vec<P2> = cloud.neighbors(i).iter().map(|&j| cloud.positions[j] - xi).collect();
    solve_stencil(&offsets, cloud.delta).ok_or(Error::WeightsSingular(i))
}

/// Points that own an equation: Ω points and collar points bonded to Ω.
pub fn active_points(cloud: &PointCloud) -> Vec<bool> {
    (0..cloud.len())
        .map(|i| match cloud.region[i] {
            r if r.in_omega() => true,
            Region::DirichletCollar => cloud.neighbors(i).iter().any(|&j| cloud.region[j].in_omega()),
            _ => false,
        })
        .collect()
}

pub fn build_rule(cloud: &PointCloud, active: &[bool]) -> Result<QuadratureRule> {
    build_rule_with(cloud, active, Exec::default())
}

pub fn build_rule_with(cloud: &PointCloud, active: &[bool], exec: Exec) -> Result<QuadratureRule> {
    let per_point = try_map_indices(exec, cloud.len(), |i| {
        if active[i] {
            solve_weights(cloud, i).map(Some)
        } else {
            Ok(None)
        }
    })?;
    let mut weights = vec![0.0; cloud.n_bonds()];
    let mut computed = vec![false; cloud.len()];
    for (i, w) in per_point.into_iter().enumerate() {
        if let Some(w) = w {
            weights[cloud.bonds(i)].copy_from_slice(&w);
            computed[i] = true;
        }
    }
    let neg: usize = (0..cloud.len())
        .filter(|&i| computed[i])
        .map(|i| weights[cloud.bonds(i)].iter().filter(|&&w| w < 0.0).count())
        .sum();
    log::info!("quadrature: {} stencils, {} negative weights", computed.iter().filter(|&&c| c).count(), neg);
    Ok(QuadratureRule { weights, computed, delta: cloud.delta })
}

/// Bond state γ aligned with neighbor slots: true = intact.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BondMask {
    pub gamma: Vec<bool>,
}

impl BondMask {
    pub fn all_intact(cloud: &PointCloud) -> BondMask {
        BondMask { gamma: vec![true; cloud.n_bonds()] }
    }

    pub fn of<'a>(&'a self, cloud: &PointCloud, i: usize) -> &'a [bool] {
        &self.gamma[cloud.bonds(i)]
    }

    pub fn any_broken(&self, cloud: &PointCloud, i: usize) -> bool {
        self.of(cloud, i).iter().any(|g| !g)
    }

    /// Fraction of the bonds to Ω points that are broken; zero outside Ω.
    pub fn damage_at(&self, cloud: &PointCloud, i: usize) -> f64 {
        if !cloud.region[i].in_omega() {
            return 0.0;
        }
        let (mut total, mut broken) = (0usize, 0usize);
        for (&g, &j) in self.of(cloud, i).iter().zip(cloud.neighbors(i)) {
            if cloud.region[j].in_omega() {
                total += 1;
                broken += usize::from(!g);
            }
        }
        if total == 0 {
            0.0
        } else {
            broken as f64 / total as f64
        }
    }
}

/// γ = 0 when the neighbor lies outside Ω ∪ collar or the bond crosses a traction boundary.
pub fn mask_from_domain(cloud: &PointCloud, domain: &Domain) -> BondMask {
    let mut gamma = vec![true; cloud.n_bonds()];
    for i in 0..cloud.len() {
        let xi = cloud.positions[i];
        for k in cloud.bonds(i) {
            let j = cloud.nbr_idx[k];
            let keep = matches!(
                cloud.region[j],
                Region::InteriorBulk | Region::InteriorNearNeumann | Region::DirichletCollar
            ) && !domain.crosses_neumann(xi, cloud.positions[j]);
            gamma[k] = keep;
        }
    }
    BondMask { gamma }
}

/// (ω̃, ω̂) = (ω γ, ω (1 - γ)).
pub fn split_weights(rule: &QuadratureRule, mask: &BondMask) -> (Vec<f64>, Vec<f64>) {
    rule.weights
        .iter()
        .zip(&mask.gamma)
        .map(|(&w, &g)| if g { (w, 0.0) } else { (0.0, w) })
        .unzip()
}

pub fn write_weights_csv(path: &Path, header: &str, cloud: &PointCloud, rule: &QuadratureRule, mask: &BondMask) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "# {header}")?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(["i", "j", "omega", "gamma"])?;
    for i in 0..cloud.len() {
        if !rule.computed[i] {
            continue;
        }
        for k in cloud.bonds(i) {
            w.write_record(&[
                i.to_string(),
                cloud.nbr_idx[k].to_string(),
                format!("{:.17e}", rule.weights[k]),
                (mask.gamma[k] as u8).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{generate_grid, BoundaryKind};

    /// Polar midpoint rule on an nr × nt grid; the r^{a+b-3} r dr factor is integrated exactly per cell.
    fn polar_oracle(a: u32, b: u32, delta: f64, nr: usize, nt: usize) -> f64 {
        let p = (a + b) as i32;
        let mut ang = 0.0;
        let dt = 2.0 * PI / nt as f64;
        for k in 0..nt {
            let t = (k as f64 + 0.5) * dt;
            ang += t.cos().powi(a as i32) * t.sin().powi(b as i32) * dt;
        }
        let dr = delta / nr as f64;
        let mut rad = 0.0;
        for k in 0..nr {
            let r = (k as f64 + 0.5) * dr;
            rad += r.powi(p - 2) * dr;
        }
        ang * rad
    }

    #[test]
    fn moments_match_polar_oracle() {
        for &(a, b) in BASIS.iter() {
            let exact = exact_ball_moment(a, b, 0.1).unwrap();
            let oracle = polar_oracle(a, b, 0.1, 4000, 4000);
            assert!((exact - oracle).abs() <= 1e-6 * oracle.abs().max(1e-3), "({a},{b}) {exact} vs {oracle}");
        }
        assert!((exact_ball_moment(2, 0, 0.1).unwrap() - 0.314_159_265_358_979_3).abs() < 1e-15);
        assert!((exact_ball_moment(2, 2, 1.0).unwrap() - 0.261_799_387_799_149_4).abs() < 1e-15);
        assert_eq!(exact_ball_moment(1, 1, 0.3).unwrap(), 0.0);
        assert!(matches!(exact_ball_moment(1, 0, 1.0), Err(Error::NonIntegrable { .. })));
    }

    #[test]
    fn basis_has_eighteen_members() {
        assert_eq!(BASIS.len(), 18);
        for &(a, b) in BASIS.iter() {
            assert!((2..=5).contains(&(a + b)));
        }
    }

    fn lattice_ball(m: f64) -> Vec<P2> {
        let r = m.ceil() as i32;
        let mut v = Vec::new();
        for a in -r..=r {
            for b in -r..=r {
                let p = P2::new(a as f64, b as f64);
                if (a, b) != (0, 0) && p.norm() <= m * (1.0 + 1e-12) {
                    v.push(p);
                }
            }
        }
        v
    }

    #[test]
    fn weights_respect_lattice_symmetry() {
        let offs = lattice_ball(3.5);
        let w = solve_stencil(&offs, 3.5).unwrap();
        let find = |p: P2| offs.iter().position(|q| (q - p).norm() < 1e-12).unwrap();
        for (k, p) in offs.iter().enumerate() {
            for q in [P2::new(-p.x, p.y), P2::new(p.y, p.x), P2::new(p.x, -p.y), P2::new(-p.y, -p.x)] {
                assert!((w[k] - w[find(q)]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn weighted_volume_is_reproduced() {
        let offs = lattice_ball(3.5);
        let delta = 3.5 * 0.01;
        let offs: Vec<P2> = offs.iter().map(|p| p * 0.01).collect();
        let w = solve_stencil(&offs, delta).unwrap();
        let m: f64 = offs.iter().zip(&w).map(|(p, w)| p.norm() * w).sum();
        let expect = 2.0 * PI * delta.powi(3) / 3.0;
        assert!(((m - expect) / expect).abs() < 1e-9);
    }

    #[test]
    fn collinear_stencil_is_singular() {
        let offs: Vec<P2> = (1..=5).map(|k| P2::new(k as f64 * 0.1, 0.0)).collect();
        assert!(solve_stencil(&offs, 1.0).is_none());
        let offs: Vec<P2> = (1..=30).map(|k| P2::new(k as f64 * 0.03, 0.0)).collect();
        assert!(solve_stencil(&offs, 1.0).is_none());
    }

    #[test]
    fn scale_covariance() {
        let offs = lattice_ball(3.9);
        let w1 = solve_stencil(&offs, 3.9).unwrap();
        let s = 0.037;
        let scaled: Vec<P2> = offs.iter().map(|p| p * s).collect();
        let w2 = solve_stencil(&scaled, 3.9 * s).unwrap();
        for (a, b) in w1.iter().zip(&w2) {
            assert!((a * s * s - b).abs() <= 1e-10 * a.abs().max(1e-3) * s * s);
        }
    }

    #[test]
    fn split_partitions_weights() {
        let a = PI / 2.0;
        let d = crate::geometry::Domain::rectangle(
            "s2",
            P2::new(-a, -a),
            P2::new(a, a),
            [BoundaryKind::Dirichlet, BoundaryKind::Dirichlet, BoundaryKind::Neumann, BoundaryKind::Dirichlet],
        );
        let c = generate_grid(&d, PI / 16.0, 3.5, 0.0, 0).unwrap();
        let rule = build_rule(&c, &active_points(&c)).unwrap();
        let mask = mask_from_domain(&c, &d);
        let (wt, wh) = split_weights(&rule, &mask);
        for k in 0..rule.weights.len() {
            assert_eq!(wt[k] + wh[k], rule.weights[k]);
        }
        let all = BondMask::all_intact(&c);
        let (_, wh) = split_weights(&rule, &all);
        assert!(wh.iter().all(|&w| w == 0.0));
        let none = BondMask { gamma: vec![false; c.n_bonds()] };
        let (wt, _) = split_weights(&rule, &none);
        assert!(wt.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn half_ball_broken_weight_sum() {
        let a = PI / 2.0;
        let h = PI / 64.0;
        let d = crate::geometry::Domain::rectangle(
            "s2",
            P2::new(-a, -a),
            P2::new(a, a),
            [BoundaryKind::Dirichlet, BoundaryKind::Dirichlet, BoundaryKind::Neumann, BoundaryKind::Dirichlet],
        );
        let c = generate_grid(&d, h, 3.5, 0.0, 0).unwrap();
        let rule = build_rule(&c, &active_points(&c)).unwrap();
        let mask = mask_from_domain(&c, &d);
        let i = c.positions.iter().position(|p| (p - P2::new(0.0, a)).norm() < 1e-9).unwrap();
        let (_, wh) = split_weights(&rule, &mask);
        let s: f64 = wh[c.bonds(i)].iter().sum();
        let delta = c.delta;
        let half = PI * delta * delta / 2.0;
        assert!((s - half).abs() < 2.0 * h * delta, "{s} vs {half}");
    }

    #[test]
    fn hole_bond_through_circle_is_broken() {
        let d = crate::geometry::Domain::rectangle_with_hole(
            "hole",
            P2::new(-0.5, -0.5),
            P2::new(0.5, 0.5),
            BoundaryKind::Dirichlet,
            P2::zeros(),
            0.2,
        );
        let c = generate_grid(&d, 0.02, 3.9, 0.0, 0).unwrap();
        let mask = mask_from_domain(&c, &d);
        let mut seen = false;
        for i in c.omega_indices() {
            for k in c.bonds(i) {
                let j = c.nbr_idx[k];
                if c.region[j].in_omega() && d.crosses_neumann(c.positions[i], c.positions[j]) {
                    assert!(!mask.gamma[k]);
                    seen = true;
                }
            }
        }
        assert!(seen);
    }
}
