//! Domains, point clouds, region tags, neighbor lists and boundary frames.

use std::collections::HashMap;
use std::f64::consts::PI;

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::par::{map_indices, Exec};

pub type P2 = Vector2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Region {
    InteriorBulk,
    /// Inside Ω and within δ of the traction boundary.
    InteriorNearNeumann,
    /// Outside Ω across the Dirichlet boundary, within 2δ.
    DirichletCollar,
    /// Outside Ω across the traction boundary, within δ.
    ExteriorNeumann,
    Unused,
}

impl Region {
    pub fn in_omega(self) -> bool {
        matches!(self, Region::InteriorBulk | Region::InteriorNearNeumann)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Region::InteriorBulk => "interior",
            Region::InteriorNearNeumann => "near_neumann",
            Region::DirichletCollar => "dirichlet_collar",
            Region::ExteriorNeumann => "exterior_neumann",
            Region::Unused => "unused",
        }
    }

    pub fn parse(s: &str) -> Option<Region> {
        Some(match s {
            "interior" => Region::InteriorBulk,
            "near_neumann" => Region::InteriorNearNeumann,
            "dirichlet_collar" => Region::DirichletCollar,
            "exterior_neumann" => Region::ExteriorNeumann,
            "unused" => Region::Unused,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundaryKind {
    Dirichlet,
    Neumann,
}

/// A boundary primitive.
#[derive(Clone, Debug)]
pub enum Curve {
    /// Straight edge with the material on the left of `a -> b`.
    Segment { a: P2, b: P2 },
    /// Full circle; `material_inside` tells which side Ω is on.
    Circle { center: P2, radius: f64, material_inside: bool },
    /// Zero-thickness slit with material on both sides (pre-crack).
    Cut { a: P2, b: P2 },
}

fn closest_on_segment(a: P2, b: P2, x: P2) -> P2 {
    let d = b - a;
    let t = ((x - a).dot(&d) / d.norm_squared()).clamp(0.0, 1.0);
    a + d * t
}

fn orient(a: P2, b: P2, c: P2) -> f64 {
    (b - a).perp(&(c - a))
}

/// Proper crossing of segments `p q` and `a b`; touching or collinear overlap is not a crossing.
fn segments_cross(p: P2, q: P2, a: P2, b: P2) -> bool {
    let scale = (q - p).norm() * (b - a).norm();
    let tol = 1e-12 * scale;
    let o1 = orient(p, q, a);
    let o2 = orient(p, q, b);
    let o3 = orient(a, b, p);
    let o4 = orient(a, b, q);
    ((o1 > tol && o2 < -tol) || (o1 < -tol && o2 > tol))
        && ((o3 > tol && o4 < -tol) || (o3 < -tol && o4 > tol))
}

impl Curve {
    pub fn closest(&self, x: P2) -> P2 {
        match *self {
            Curve::Segment { a, b } | Curve::Cut { a, b } => closest_on_segment(a, b, x),
            Curve::Circle { center, radius, .. } => {
                let r = x - center;
                let n = r.norm();
                if n == 0.0 {
                    center + P2::new(radius, 0.0)
                } else {
                    center + r * (radius / n)
                }
            }
        }
    }

    pub fn distance(&self, x: P2) -> f64 {
        match *self {
            Curve::Circle { center, radius, .. } => ((x - center).norm() - radius).abs(),
            _ => (x - self.closest(x)).norm(),
        }
    }

    /// Outward unit normal of Ω at the projection `xbar` of `x`.
    pub fn outward_normal(&self, x: P2, xbar: P2) -> P2 {
        match *self {
            Curve::Segment { a, b } => {
                let d = (b - a).normalize();
                P2::new(d.y, -d.x)
            }
            Curve::Circle { center, material_inside, .. } => {
                let r = (xbar - center).normalize();
                if material_inside {
                    r
                } else {
                    -r
                }
            }
            Curve::Cut { a, b } => {
                let s = xbar - x;
                if s.norm() > 1e-14 * (b - a).norm() {
                    s.normalize()
                } else {
                    let d = (b - a).normalize();
                    P2::new(d.y, -d.x)
                }
            }
        }
    }

    /// Does the bond `p -> q` pass through this curve transversally?
    pub fn crosses(&self, p: P2, q: P2) -> bool {
        match *self {
            Curve::Segment { a, b } | Curve::Cut { a, b } => segments_cross(p, q, a, b),
            Curve::Circle { center, radius, .. } => {
                let d = q - p;
                let f = p - center;
                let qa = d.norm_squared();
                let qb = 2.0 * f.dot(&d);
                let qc = f.norm_squared() - radius * radius;
                let disc = qb * qb - 4.0 * qa * qc;
                if disc <= 1e-12 * qa * radius * radius {
                    return false;
                }
                let s = disc.sqrt();
                let t1 = (-qb - s) / (2.0 * qa);
                let t2 = (-qb + s) / (2.0 * qa);
                let eps = 1e-12;
                (t1 > eps && t1 < 1.0 - eps) || (t2 > eps && t2 < 1.0 - eps)
            }
        }
    }

    /// Strictly on the exterior side of the supporting line or circle.
    pub fn strictly_outside(&self, x: P2, tol: f64) -> bool {
        match *self {
            Curve::Segment { a, b } => {
                let d = (b - a).normalize();
                (x - a).dot(&P2::new(d.y, -d.x)) > tol
            }
            Curve::Circle { center, radius, material_inside } => {
                let r = (x - center).norm();
                if material_inside {
                    r - radius > tol
                } else {
                    radius - r > tol
                }
            }
            Curve::Cut { .. } => false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundaryPiece {
    pub curve: Curve,
    pub kind: BoundaryKind,
}

/// Region Ω as a signed-distance shape (negative inside).
#[derive(Clone, Debug)]
pub enum Shape {
    Rect { min: P2, max: P2 },
    Disk { center: P2, radius: f64 },
    /// Simple polygon, counter-clockwise.
    Polygon(Vec<P2>),
    Not(Box<Shape>),
    And(Vec<Shape>),
}

impl Shape {
    pub fn sdf(&self, x: P2) -> f64 {
        match self {
            Shape::Rect { min, max } => {
                let c = (min + max) * 0.5;
                let half = (max - min) * 0.5;
                let q = (x - c).abs() - half;
                let outside = P2::new(q.x.max(0.0), q.y.max(0.0)).norm();
                outside + q.x.max(q.y).min(0.0)
            }
            Shape::Disk { center, radius } => (x - center).norm() - radius,
            Shape::Polygon(v) => polygon_sdf(v, x),
            Shape::Not(s) => -s.sdf(x),
            Shape::And(parts) => parts.iter().map(|s| s.sdf(x)).fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

fn polygon_sdf(v: &[P2], p: P2) -> f64 {
    let n = v.len();
    let mut d = (p - v[0]).norm_squared();
    let mut s = 1.0;
    let mut j = n - 1;
    for i in 0..n {
        let e = v[j] - v[i];
        let w = p - v[i];
        let t = (w.dot(&e) / e.norm_squared()).clamp(0.0, 1.0);
        let b = w - e * t;
        d = d.min(b.norm_squared());
        let c1 = p.y >= v[i].y;
        let c2 = p.y < v[j].y;
        let c3 = e.x * w.y > e.y * w.x;
        if (c1 && c2 && c3) || (!c1 && !c2 && !c3) {
            s = -s;
        }
        j = i;
    }
    s * d.sqrt()
}

#[derive(Clone, Debug)]
pub struct Domain {
    pub name: String,
    pub shape: Shape,
    pub pieces: Vec<BoundaryPiece>,
    pub bbox: [P2; 2],
    /// Lattice offset from `bbox[0]` in units of h.
    pub lattice_shift: [f64; 2],
}

impl Domain {
    pub fn sdf(&self, x: P2) -> f64 {
        self.shape.sdf(x)
    }

    /// Nearest piece of the given kind and its distance.
    pub fn nearest(&self, x: P2, kind: BoundaryKind) -> Option<(usize, f64)> {
        self.pieces
            .iter()
            .enumerate()
            .filter(|(_, p)| p.kind == kind)
            .map(|(k, p)| (k, p.curve.distance(x)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }

    pub fn distance_to(&self, x: P2, kind: BoundaryKind) -> f64 {
        self.nearest(x, kind).map_or(f64::INFINITY, |(_, d)| d)
    }

    /// Indices of traction pieces closer than `r`.
    pub fn neumann_within(&self, x: P2, r: f64) -> Vec<usize> {
        self.pieces
            .iter()
            .enumerate()
            .filter(|(_, p)| p.kind == BoundaryKind::Neumann && p.curve.distance(x) < r)
            .map(|(k, _)| k)
            .collect()
    }

    pub fn has_neumann(&self) -> bool {
        self.pieces.iter().any(|p| p.kind == BoundaryKind::Neumann)
    }

    pub fn crosses_neumann(&self, p: P2, q: P2) -> bool {
        self.pieces
            .iter()
            .any(|pc| pc.kind == BoundaryKind::Neumann && pc.curve.crosses(p, q))
    }

    /// Axis-aligned rectangle; `kinds` are bottom, right, top, left.
    pub fn rectangle(name: &str, min: P2, max: P2, kinds: [BoundaryKind; 4]) -> Domain {
        let c = [min, P2::new(max.x, min.y), max, P2::new(min.x, max.y)];
        let pieces = (0..4)
            .map(|k| BoundaryPiece {
                curve: Curve::Segment { a: c[k], b: c[(k + 1) % 4] },
                kind: kinds[k],
            })
            .collect();
        Domain {
            name: name.into(),
            shape: Shape::Rect { min, max },
            pieces,
            bbox: [min, max],
            lattice_shift: [0.0, 0.0],
        }
    }

    /// Rectangle minus a disk; the circle is a traction boundary.
    pub fn rectangle_with_hole(name: &str, min: P2, max: P2, outer: BoundaryKind, center: P2, radius: f64) -> Domain {
        let mut d = Domain::rectangle(name, min, max, [outer; 4]);
        d.shape = Shape::And(vec![
            Shape::Rect { min, max },
            Shape::Not(Box::new(Shape::Disk { center, radius })),
        ]);
        d.pieces.push(BoundaryPiece {
            curve: Curve::Circle { center, radius, material_inside: false },
            kind: BoundaryKind::Neumann,
        });
        d
    }

    pub fn annulus(name: &str, center: P2, r_in: f64, r_out: f64, inner: BoundaryKind, outer: BoundaryKind) -> Domain {
        let pad = P2::new(r_out, r_out);
        Domain {
            name: name.into(),
            shape: Shape::And(vec![
                Shape::Disk { center, radius: r_out },
                Shape::Not(Box::new(Shape::Disk { center, radius: r_in })),
            ]),
            pieces: vec![
                BoundaryPiece {
                    curve: Curve::Circle { center, radius: r_in, material_inside: false },
                    kind: inner,
                },
                BoundaryPiece {
                    curve: Curve::Circle { center, radius: r_out, material_inside: true },
                    kind: outer,
                },
            ],
            bbox: [center - pad, center + pad],
            lattice_shift: [0.0, 0.0],
        }
    }

    /// Counter-clockwise polygon with one boundary kind per edge (edge k runs v[k] -> v[k+1]).
    pub fn polygon(name: &str, vertices: Vec<P2>, kinds: Vec<BoundaryKind>) -> Domain {
        assert_eq!(vertices.len(), kinds.len());
        let n = vertices.len();
        let pieces = (0..n)
            .map(|k| BoundaryPiece {
                curve: Curve::Segment { a: vertices[k], b: vertices[(k + 1) % n] },
                kind: kinds[k],
            })
            .collect();
        let mut lo = P2::repeat(f64::INFINITY);
        let mut hi = P2::repeat(f64::NEG_INFINITY);
        for v in &vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        Domain {
            name: name.into(),
            shape: Shape::Polygon(vertices),
            pieces,
            bbox: [lo, hi],
            lattice_shift: [0.0, 0.0],
        }
    }

    pub fn with_cut(mut self, a: P2, b: P2) -> Domain {
        self.pieces.push(BoundaryPiece { curve: Curve::Cut { a, b }, kind: BoundaryKind::Neumann });
        self
    }

    pub fn with_lattice_shift(mut self, sx: f64, sy: f64) -> Domain {
        self.lattice_shift = [sx, sy];
        self
    }

    /// Largest |sdf(x) - sdf(y)| / |x - y| over random pairs in the bounding box.
    pub fn lipschitz_estimate(&self, samples: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [lo, hi] = self.bbox;
        let mut worst: f64 = 0.0;
        for _ in 0..samples {
            let x = P2::new(rng.random_range(lo.x..=hi.x), rng.random_range(lo.y..=hi.y));
            let y = P2::new(rng.random_range(lo.x..=hi.x), rng.random_range(lo.y..=hi.y));
            let d = (x - y).norm();
            if d > 1e-12 {
                worst = worst.max((self.sdf(x) - self.sdf(y)).abs() / d);
            }
        }
        worst
    }
}

/// Collocation points plus a symmetric neighbor list in CSR layout.
#[derive(Clone, Debug)]
pub struct PointCloud {
    pub positions: Vec<P2>,
    /// Unperturbed lattice index of each point.
    pub lattice: Vec<[i64; 2]>,
    pub cell_measure: Vec<f64>,
    pub region: Vec<Region>,
    pub h: f64,
    pub delta: f64,
    pub nbr_ptr: Vec<usize>,
    pub nbr_idx: Vec<usize>,
}

impl PointCloud {
    /// A cloud from raw positions; regions default to `InteriorBulk`, neighbors are built.
    pub fn from_positions(positions: Vec<P2>, h: f64, delta: f64) -> PointCloud {
        let n = positions.len();
        let lattice = positions
            .iter()
            .map(|p| [(p.x / h).round() as i64, (p.y / h).round() as i64])
            .collect();
        let mut c = PointCloud {
            positions,
            lattice,
            cell_measure: vec![h * h; n],
            region: vec![Region::InteriorBulk; n],
            h,
            delta,
            nbr_ptr: vec![0; n + 1],
            nbr_idx: Vec::new(),
        };
        build_neighbors(&mut c, Exec::Sequential);
        c
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.nbr_idx[self.nbr_ptr[i]..self.nbr_ptr[i + 1]]
    }

    pub fn bonds(&self, i: usize) -> std::ops::Range<usize> {
        self.nbr_ptr[i]..self.nbr_ptr[i + 1]
    }

    pub fn n_bonds(&self) -> usize {
        self.nbr_idx.len()
    }

    /// Bond slot of `(j, i)` for every slot `(i, j)`.
    pub fn reverse_bonds(&self) -> Vec<usize> {
        let mut rev = vec![usize::MAX; self.n_bonds()];
        for i in 0..self.len() {
            for k in self.bonds(i) {
                let j = self.nbr_idx[k];
                let nb = self.neighbors(j);
                let pos = nb.binary_search(&i).expect("neighbor list must be symmetric and sorted");
                rev[k] = self.nbr_ptr[j] + pos;
            }
        }
        rev
    }

    pub fn omega_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.region[i].in_omega()).collect()
    }

    pub fn count(&self, r: Region) -> usize {
        self.region.iter().filter(|&&x| x == r).count()
    }
}

/// Cartesian lattice over the inflated bounding box, optionally perturbed, classified and linked.
pub fn generate_grid(domain: &Domain, h: f64, m_ratio: f64, perturb_r: f64, seed: u64) -> Result<PointCloud> {
    generate_grid_with(domain, h, m_ratio, perturb_r, seed, Exec::default())
}

pub fn generate_grid_with(
    domain: &Domain,
    h: f64,
    m_ratio: f64,
    perturb_r: f64,
    seed: u64,
    exec: Exec,
) -> Result<PointCloud> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Config(format!("grid spacing must be positive, got {h}")));
    }
    if !(0.0..=0.2).contains(&perturb_r) {
        return Err(Error::Config(format!("perturbation ratio {perturb_r} outside [0, 0.2]")));
    }
    let delta = m_ratio * h;
    // one extra spacing keeps perturbed balls of collar points full
    let pad = 2.0 * delta + h;
    let lo = domain.bbox[0] - P2::repeat(pad);
    let hi = domain.bbox[1] + P2::repeat(pad);
    let anchor = domain.bbox[0] + P2::new(domain.lattice_shift[0], domain.lattice_shift[1]) * h;
    let i0 = ((lo.x - anchor.x) / h - 1e-9).ceil() as i64;
    let i1 = ((hi.x - anchor.x) / h + 1e-9).floor() as i64;
    let j0 = ((lo.y - anchor.y) / h - 1e-9).ceil() as i64;
    let j1 = ((hi.y - anchor.y) / h + 1e-9).floor() as i64;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let amp = perturb_r * h;
    let mut positions = Vec::new();
    let mut lattice = Vec::new();
    for iy in j0..=j1 {
        for ix in i0..=i1 {
            let mut p = anchor + P2::new(ix as f64 * h, iy as f64 * h);
            if amp > 0.0 {
                p.x += rng.random_range(-amp..=amp);
                p.y += rng.random_range(-amp..=amp);
            }
            positions.push(p);
            lattice.push([ix, iy]);
        }
    }
    let n = positions.len();
    let mut cloud = PointCloud {
        positions,
        lattice,
        cell_measure: vec![h * h; n],
        region: vec![Region::Unused; n],
        h,
        delta,
        nbr_ptr: vec![0; n + 1],
        nbr_idx: Vec::new(),
    };
    classify_regions(&mut cloud, domain);
    if cloud.omega_indices().is_empty() {
        return Err(Error::Config(format!(
            "no collocation points inside '{}' at h = {h}",
            domain.name
        )));
    }
    build_neighbors(&mut cloud, exec);
    Ok(cloud)
}

/// Tag every point with its region.
pub fn classify_regions(cloud: &mut PointCloud, domain: &Domain) {
    let delta = cloud.delta;
    let tol = 1e-9 * cloud.h;
    for (i, &x) in cloud.positions.iter().enumerate() {
        let dn = domain.nearest(x, BoundaryKind::Neumann);
        let d_n = dn.map_or(f64::INFINITY, |(_, d)| d);
        let region = if domain.sdf(x) <= tol {
            if d_n < delta {
                Region::InteriorNearNeumann
            } else {
                Region::InteriorBulk
            }
        } else {
            let d_d = domain.distance_to(x, BoundaryKind::Dirichlet);
            let exterior_n = if d_n < delta {
                if d_n < d_d - tol {
                    true
                } else if (d_n - d_d).abs() <= tol {
                    // equidistant: traction side only when strictly beyond the traction edge
                    let (k, _) = dn.unwrap();
                    let out = domain.pieces[k].curve.strictly_outside(x, tol);
                    log::debug!("point {i} equidistant from both boundary kinds; exterior_neumann = {out}");
                    out
                } else {
                    false
                }
            } else {
                false
            };
            if exterior_n {
                Region::ExteriorNeumann
            } else if d_d <= 2.0 * delta + tol {
                Region::DirichletCollar
            } else {
                Region::Unused
            }
        };
        cloud.region[i] = region;
    }
}

/// Symmetric neighbor lists via uniform binning with bin size δ.
pub fn build_neighbors(cloud: &mut PointCloud, exec: Exec) {
    let n = cloud.len();
    let delta = cloud.delta;
    let r2 = (delta * (1.0 + 1e-12)).powi(2);
    // bins a little wider than δ so pairs at exactly δ never land two bins apart
    let bin = delta * (1.0 + 1e-9);
    let key = |p: &P2| ((p.x / bin).floor() as i64, (p.y / bin).floor() as i64);
    let mut bins: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in cloud.positions.iter().enumerate() {
        bins.entry(key(p)).or_default().push(i);
    }
    let pos = &cloud.positions;
    let lists = map_indices(exec, n, |i| {
        let (bx, by) = key(&pos[i]);
        let mut out = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(b) = bins.get(&(bx + dx, by + dy)) {
                    for &j in b {
                        if j != i && (pos[j] - pos[i]).norm_squared() <= r2 {
                            out.push(j);
                        }
                    }
                }
            }
        }
        out.sort_unstable();
        out
    });
    let mut ptr = Vec::with_capacity(n + 1);
    ptr.push(0);
    let mut idx = Vec::with_capacity(lists.iter().map(Vec::len).sum());
    for l in lists {
        idx.extend_from_slice(&l);
        ptr.push(idx.len());
    }
    cloud.nbr_ptr = ptr;
    cloud.nbr_idx = idx;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameSource {
    Estimated,
    Exact,
}

/// Local boundary frame: outward normal, tangent, and projection used for traction lookup.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frame {
    pub n: P2,
    pub p: P2,
    pub xbar: P2,
    pub source: FrameSource,
}

/// Rotate +90 degrees.
pub fn tangent_of(n: P2) -> P2 {
    P2::new(-n.y, n.x)
}

impl Frame {
    pub fn from_normal(n: P2, xbar: P2, source: FrameSource) -> Frame {
        let n = n.normalize();
        Frame { n, p: tangent_of(n), xbar, source }
    }

    /// Frame from the nearest traction piece.
    pub fn exact(domain: &Domain, x: P2) -> Option<Frame> {
        let (k, _) = domain.nearest(x, BoundaryKind::Neumann)?;
        let c = &domain.pieces[k].curve;
        let xbar = c.closest(x);
        Some(Frame::from_normal(c.outward_normal(x, xbar), xbar, FrameSource::Exact))
    }
}

/// n_i = -Σ ξ ω̃ / |Σ ξ ω̃| over the intact weights aligned with the neighbors of `i`.
pub fn estimate_normal(cloud: &PointCloud, i: usize, w_intact: &[f64]) -> Result<P2> {
    let xi = cloud.positions[i];
    let mut s = P2::zeros();
    for (&j, &w) in cloud.neighbors(i).iter().zip(w_intact) {
        s += (cloud.positions[j] - xi) * w;
    }
    let norm = s.norm();
    // relative to the scale of a single bond contribution
    let scale = cloud.delta * cloud.h * cloud.h;
    if !(norm > 1e-12 * scale) {
        return Err(Error::FrameDegenerate(i));
    }
    Ok(-s / norm)
}

/// Estimated frame with `xbar = x + dist(x, ∂Ω_N) n`.
pub fn estimate_frame(cloud: &PointCloud, domain: &Domain, i: usize, w_intact: &[f64]) -> Result<Frame> {
    let n = estimate_normal(cloud, i, w_intact)?;
    let x = cloud.positions[i];
    let d = domain.distance_to(x, BoundaryKind::Neumann);
    let xbar = if d.is_finite() { x + n * d } else { x };
    Ok(Frame::from_normal(n, xbar, FrameSource::Estimated))
}

/// Area of a disk of radius r, used by tests and the ring particle count.
pub fn disk_area(r: f64) -> f64 {
    PI * r * r
}

#[cfg(test)]
mod tests {
    use super::*;
    use BoundaryKind::*;

    fn square(kinds: [BoundaryKind; 4]) -> Domain {
        let a = PI / 2.0;
        Domain::rectangle("sq", P2::new(-a, -a), P2::new(a, a), kinds)
    }

    #[test]
    fn lattice_includes_boundary_rows() {
        let h = PI / 32.0;
        let c = generate_grid(&square([Dirichlet; 4]), h, 3.5, 0.0, 1).unwrap();
        assert_eq!(c.omega_indices().len(), 33 * 33);
        assert_eq!(c.count(Region::InteriorNearNeumann), 0);
        assert_eq!(c.count(Region::ExteriorNeumann), 0);
    }

    #[test]
    fn perturbation_is_deterministic_and_bounded() {
        let h = PI / 16.0;
        let d = square([Dirichlet; 4]);
        let a = generate_grid(&d, h, 3.5, 0.2, 7).unwrap();
        let b = generate_grid(&d, h, 3.5, 0.2, 7).unwrap();
        assert_eq!(a.positions, b.positions);
        let shift = d.bbox[0];
        for (p, l) in a.positions.iter().zip(&a.lattice) {
            let q = shift + P2::new(l[0] as f64, l[1] as f64) * h;
            assert!((p - q).abs().max() <= 0.2 * h + 1e-15);
        }
    }

    #[test]
    fn setting2_near_neumann_count_matches_distance_check() {
        let h = PI / 16.0;
        let m = 3.5;
        let c = generate_grid(&square([Dirichlet, Dirichlet, Neumann, Dirichlet]), h, m, 0.0, 1).unwrap();
        let rows = (0..17).filter(|k| (*k as f64) * h < m * h).count();
        assert_eq!(c.count(Region::InteriorNearNeumann), 17 * rows);
    }

    #[test]
    fn interior_neighbor_count() {
        let h = 0.1;
        let d = Domain::rectangle("u", P2::new(0.0, 0.0), P2::new(2.0, 2.0), [Dirichlet; 4]);
        let c = generate_grid(&d, h, 3.5, 0.0, 0).unwrap();
        let centre = c
            .positions
            .iter()
            .position(|p| (p - P2::new(1.0, 1.0)).norm() < 1e-9)
            .unwrap();
        let brute = (-4i32..=4)
            .flat_map(|a| (-4i32..=4).map(move |b| (a, b)))
            .filter(|&(a, b)| (a, b) != (0, 0) && ((a * a + b * b) as f64) <= 12.25)
            .count();
        assert_eq!(brute, 36);
        assert_eq!(c.neighbors(centre).len(), brute);
    }

    #[test]
    fn neighbor_lists_match_brute_force() {
        let mut pos = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for iy in 0..12 {
            for ix in 0..12 {
                pos.push(P2::new(ix as f64 + rng.random_range(-0.2..0.2), iy as f64 + rng.random_range(-0.2..0.2)));
            }
        }
        let c = PointCloud::from_positions(pos.clone(), 1.0, 2.7);
        for i in 0..pos.len() {
            let brute: Vec<usize> = (0..pos.len())
                .filter(|&j| j != i && (pos[j] - pos[i]).norm() <= 2.7)
                .collect();
            assert_eq!(c.neighbors(i), brute.as_slice());
            for &j in c.neighbors(i) {
                assert!(c.neighbors(j).contains(&i));
            }
        }
        let lone = PointCloud::from_positions(vec![P2::zeros()], 1.0, 2.0);
        assert!(lone.neighbors(0).is_empty());
    }

    #[test]
    fn integer_ratio_keeps_bonds_at_exactly_delta() {
        // 0.9 / 0.3 and 1.2 / 0.3 round to bins two apart
        let d = Domain::rectangle("box", P2::new(0.0, 0.0), P2::new(1.0, 1.0), [BoundaryKind::Dirichlet; 4]);
        let c = generate_grid(&d, 0.1, 3.0, 0.0, 1).unwrap();
        for i in c.omega_indices() {
            assert_eq!(c.neighbors(i).len(), 28, "at {:?}", c.positions[i]);
        }
    }

    #[test]
    fn hole_and_disk_exterior_bands() {
        let h = 1.0 / 25.0;
        let hole = Domain::rectangle_with_hole("hole", P2::new(-0.5, -0.5), P2::new(0.5, 0.5), Dirichlet, P2::zeros(), 0.2);
        let c = generate_grid(&hole, h, 3.5, 0.0, 0).unwrap();
        for (p, r) in c.positions.iter().zip(&c.region) {
            let rad = p.norm();
            if rad < 0.2 - 1e-12 {
                let expect = if 0.2 - rad < 3.5 * h { Region::ExteriorNeumann } else { Region::Unused };
                assert_eq!(*r, expect, "at r = {rad}");
            }
        }
        let disk = Domain::annulus("disk", P2::zeros(), 1.0, 1.5, Neumann, Dirichlet);
        let h = 0.05;
        let c = generate_grid(&disk, h, 3.5, 0.0, 0).unwrap();
        for (p, r) in c.positions.iter().zip(&c.region) {
            if *r == Region::ExteriorNeumann {
                let rad = p.norm();
                assert!(rad > 1.0 - 3.5 * h && rad < 1.0);
            }
        }
    }

    #[test]
    fn corner_tie_goes_to_traction_only_beyond_the_edge() {
        let h = PI / 16.0;
        let d = square([Dirichlet, Dirichlet, Neumann, Dirichlet]);
        let c = generate_grid(&d, h, 3.5, 0.0, 1).unwrap();
        let a = PI / 2.0;
        for (p, r) in c.positions.iter().zip(&c.region) {
            if p.x < -a - 1e-9 && p.x > -a - 2.0 * 3.5 * h && (p.y - a).abs() < 1e-9 {
                assert_eq!(*r, Region::DirichletCollar);
            }
            if p.x < -a - 1e-9 && p.y > a + 1e-9 && (p - P2::new(-a, a)).norm() < 3.5 * h {
                assert_eq!(*r, Region::ExteriorNeumann);
            }
        }
    }

    #[test]
    fn sdf_is_lipschitz() {
        let hole = Domain::rectangle_with_hole("hole", P2::new(-0.5, -0.5), P2::new(0.5, 0.5), Dirichlet, P2::zeros(), 0.2);
        assert!(hole.lipschitz_estimate(20_000, 5) <= 1.0 + 1e-9);
        let poly = Domain::polygon(
            "v",
            vec![P2::new(0.0, 0.0), P2::new(2.0, 0.0), P2::new(2.0, 1.0), P2::new(0.0, 1.0), P2::new(0.5, 0.5)],
            vec![Neumann; 5],
        );
        assert!(poly.lipschitz_estimate(20_000, 6) <= 1.0 + 1e-9);
        assert!(poly.sdf(P2::new(1.0, 0.5)) < 0.0);
        assert!(poly.sdf(P2::new(0.2, 0.5)) > 0.0);
    }

    #[test]
    fn circle_crossing_rules() {
        let c = Curve::Circle { center: P2::zeros(), radius: 0.2, material_inside: false };
        assert!(c.crosses(P2::new(-0.3, 0.0), P2::new(0.3, 0.0)));
        assert!(!c.crosses(P2::new(-0.3, 0.2), P2::new(0.3, 0.2)));
        assert!(!c.crosses(P2::new(-0.3, 0.25), P2::new(0.3, 0.25)));
        let disk = Curve::Circle { center: P2::zeros(), radius: 1.0, material_inside: false };
        assert!(disk.crosses(P2::new(1.02, 0.0), P2::new(0.97, 0.0)));
    }

    #[test]
    fn exact_frame_on_circle() {
        let hole = Domain::rectangle_with_hole("hole", P2::new(-0.5, -0.5), P2::new(0.5, 0.5), Dirichlet, P2::zeros(), 0.2);
        let f = Frame::exact(&hole, P2::new(0.13, 0.21)).unwrap();
        assert!((f.xbar.norm() - 0.2).abs() < 1e-10);
        assert!((f.n.norm() - 1.0).abs() < 1e-12);
        assert!(f.n.dot(&f.p).abs() < 1e-12);
        // into the hole
        assert!(f.n.dot(&P2::new(0.13, 0.21)) < 0.0);
    }

    #[test]
    fn region_tags_invariant_under_permutation() {
        let hole = Domain::rectangle_with_hole("hole", P2::new(-0.5, -0.5), P2::new(0.5, 0.5), Dirichlet, P2::zeros(), 0.2);
        let c = generate_grid(&hole, 1.0 / 20.0, 3.5, 0.2, 2).unwrap();
        let mut perm: Vec<usize> = (0..c.len()).collect();
        perm.reverse();
        let mut d = c.clone();
        d.positions = perm.iter().map(|&k| c.positions[k]).collect();
        classify_regions(&mut d, &hole);
        for (a, &k) in perm.iter().enumerate() {
            assert_eq!(d.region[a], c.region[k]);
        }
    }
}
