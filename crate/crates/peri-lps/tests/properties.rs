//! Invariants that hold for any input, checked on random instances.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix2};
use peri_lps::dynamics::{damage, DynamicProblem, FractureCriterion, FractureState, Integrator, StepSolver};
use peri_lps::geometry::{generate_grid, BoundaryKind, Domain, FrameSource, PointCloud, P2};
use peri_lps::lps::{apply_interior, correction_tensor, dilatation, Kernel, Material, MaterialField};
use peri_lps::quadrature::{
    active_points, build_rule, constraint_matrix, mask_from_domain, moment_vector, solve_stencil, split_weights, BondMask, QuadratureRule,
};
use peri_lps::static_solver::BoundaryConditions;
use peri_lps::Exec;
use proptest::prelude::*;

fn square(h: f64, perturb: f64, seed: u64) -> (PointCloud, QuadratureRule) {
    let a = PI / 2.0;
    let d = Domain::rectangle("sq", P2::new(-a, -a), P2::new(a, a), [BoundaryKind::Dirichlet; 4]);
    let c = generate_grid(&d, h, 3.5, perturb, seed).unwrap();
    let r = build_rule(&c, &active_points(&c)).unwrap();
    (c, r)
}

fn uniform(c: &PointCloud, nu: f64) -> MaterialField {
    MaterialField::uniform(c.len(), Material::plane_strain(1.0, nu))
}

/// Dense KKT solve of min |w|² subject to A w = g.
fn kkt_min_norm(a: &DMatrix<f64>, g: &DVector<f64>) -> DVector<f64> {
    let (m, n) = a.shape();
    let mut k = DMatrix::zeros(n + m, n + m);
    k.view_mut((0, 0), (n, n)).fill_with_identity();
    k.view_mut((0, n), (n, m)).copy_from(&a.transpose());
    k.view_mut((n, 0), (m, n)).copy_from(a);
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(n, m).copy_from(g);
    let sol = k.lu().solve(&rhs).expect("nonsingular KKT system");
    sol.rows(0, n).into_owned()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn rigid_motion_is_in_the_nullspace(
        tx in -1.0..1.0f64, ty in -1.0..1.0f64, w in -1.0..1.0f64,
        perturb in 0.0..0.2f64, seed in 0u64..1000, nu in 0.1..0.49f64,
    ) {
        let (c, r) = square(PI / 8.0, perturb, seed);
        let u: Vec<P2> = c.positions.iter().map(|x| P2::new(tx - w * x.y, ty + w * x.x)).collect();
        let theta = dilatation(&c, &r, &u);
        let zero = vec![0.0; c.len()];
        let lu = apply_interior(&c, &r, &uniform(&c, nu), &u, &zero);
        for i in c.omega_indices() {
            prop_assert!(theta[i].abs() <= 1e-9, "θ = {}", theta[i]);
            prop_assert!(lu[i].norm() <= 1e-9, "Lu = {}", lu[i].norm());
        }
    }

    #[test]
    fn correction_is_identity_on_full_balls(perturb in 0.0..0.2f64, seed in 0u64..1000) {
        let (c, r) = square(PI / 8.0, perturb, seed);
        let k = Kernel::new(c.delta);
        for i in c.omega_indices() {
            let corr = correction_tensor(&c, &k, r.of(&c, i), i);
            prop_assert!(!corr.pseudo_inverse);
            prop_assert!((corr.m - Matrix2::identity()).abs().max() <= 1e-9, "{}", corr.m);
            prop_assert_eq!(corr.m, corr.m.transpose());
        }
    }

    #[test]
    fn damage_never_decreases(first in prop::collection::vec(any::<bool>(), 64), second in prop::collection::vec(any::<bool>(), 64), seed in 0u64..100) {
        let d = Domain::rectangle("strip", P2::new(0.0, 0.0), P2::new(1.0, 0.4), [BoundaryKind::Neumann; 4]);
        let c = generate_grid(&d, 0.1, 3.0, 0.1, seed).unwrap();
        let rev = c.reverse_bonds();
        let base = mask_from_domain(&c, &d);
        let cut = |m: &mut BondMask, pick: &[bool], salt: usize| {
            for k in 0..m.gamma.len() {
                if pick[(k * 7 + salt) % pick.len()] && k % 3 == salt % 3 {
                    m.gamma[k] = false;
                    m.gamma[rev[k]] = false;
                }
            }
        };
        let mut m1 = base.clone();
        cut(&mut m1, &first, 1);
        let mut m2 = m1.clone();
        cut(&mut m2, &second, 2);
        let (p0, p1, p2) = (damage(&c, &base), damage(&c, &m1), damage(&c, &m2));
        for i in 0..c.len() {
            prop_assert!(p0[i] <= p1[i] && p1[i] <= p2[i]);
            prop_assert!((0.0..=1.0).contains(&p2[i]));
        }
    }

    #[test]
    fn gamma_split_partitions_weights(pick in prop::collection::vec(any::<bool>(), 1..200), perturb in 0.0..0.2f64) {
        let (c, r) = square(PI / 4.0, perturb, 5);
        let gamma: Vec<bool> = (0..c.n_bonds()).map(|k| pick[k % pick.len()]).collect();
        let mask = BondMask { gamma };
        let (intact, broken) = split_weights(&r, &mask);
        for k in 0..r.weights.len() {
            prop_assert_eq!(intact[k] + broken[k], r.weights[k]);
            prop_assert!(intact[k] == 0.0 || broken[k] == 0.0);
            prop_assert_eq!(intact[k] != 0.0 || r.weights[k] == 0.0, mask.gamma[k] || r.weights[k] == 0.0);
        }
    }

    #[test]
    fn weights_match_a_brute_force_kkt_solve(
        pts in prop::collection::vec((0.15..1.0f64, 0.0..(2.0 * PI)), 20),
        delta in 0.01..10.0f64,
    ) {
        let offsets: Vec<P2> = pts.iter().map(|&(r, a)| P2::new(a.cos(), a.sin()) * (r * delta)).collect();
        let a = constraint_matrix(&offsets, delta);
        let sv = a.clone().svd(false, false).singular_values;
        // nearly dependent stencils make both solves ill-posed
        prop_assume!(sv.min() > 1e-6 * sv.max());
        let g = moment_vector(delta);
        let w = solve_stencil(&offsets, delta).expect("full-rank stencil");
        let brute = kkt_min_norm(&a, &g);
        let diff = w.iter().zip(brute.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        prop_assert!(diff <= 1e-8 * brute.norm().max(1.0), "{diff}");
    }

    #[test]
    fn newmark_is_exact_for_constant_acceleration(
        rho in 0.1..10.0f64, fx in -5.0..5.0f64, fy in -5.0..5.0f64,
        vx in -1.0..1.0f64, vy in -1.0..1.0f64, dt in 1e-3..0.5f64,
    ) {
        let d = Domain::rectangle("pt", P2::new(-1.0, -1.0), P2::new(1.0, 1.0), [BoundaryKind::Neumann; 4]);
        let c = PointCloud::from_positions(vec![P2::zeros()], 1.0, 0.5);
        let r = QuadratureRule { weights: vec![], computed: vec![true], delta: 0.5 };
        let f = P2::new(fx, fy);
        let g = f / rho;
        let mats = MaterialField::uniform(1, Material::new(1.0, 1.0).with_density(rho));
        let bcs = BoundaryConditions::free().with_body_force(move |_| f);
        let p = DynamicProblem {
            domain: &d, cloud: &c, rule: &r, materials: &mats, bcs: &bcs,
            normals: FrameSource::Estimated, dt,
            criterion: FractureCriterion::unbreakable(), subiteration_cap: 1,
            solver: StepSolver::Direct,
        };
        let mut it = Integrator::new(p, Exec::Sequential).unwrap();
        let mut s = FractureState::at_rest(&c, BondMask { gamma: vec![] });
        let v0 = P2::new(vx, vy);
        s.v[0] = v0;
        s.a[0] = g;
        for n in 1..=8 {
            it.step(&mut s).unwrap();
            let t = n as f64 * dt;
            let scale = 1.0 + (v0 * t).norm() + (g * t * t).norm();
            prop_assert!((s.u[0] - (v0 * t + g * (t * t / 2.0))).norm() <= 1e-12 * scale);
            prop_assert!((s.a[0] - g).norm() <= 1e-6 * (1.0 + g.norm()));
        }
    }

    #[test]
    fn operators_are_translation_invariant(sx in -10.0..10.0f64, sy in -10.0..10.0f64, perturb in 0.0..0.2f64) {
        let (c, r) = square(PI / 8.0, perturb, 11);
        let mut moved = c.clone();
        for p in &mut moved.positions {
            *p += P2::new(sx, sy);
        }
        let rm = build_rule(&moved, &active_points(&moved)).unwrap();
        let u: Vec<P2> = c.positions.iter().map(|x| P2::new(x.x * x.x - x.y, x.x * x.y + 0.5 * x.y * x.y)).collect();
        let mats = uniform(&c, 0.3);
        let (t0, t1) = (dilatation(&c, &r, &u), dilatation(&moved, &rm, &u));
        let fill = |t: &[f64]| t.iter().map(|v| if v.is_nan() { 0.0 } else { *v }).collect::<Vec<_>>();
        let (l0, l1) = (apply_interior(&c, &r, &mats, &u, &fill(&t0)), apply_interior(&moved, &rm, &mats, &u, &fill(&t0)));
        for i in c.omega_indices() {
            prop_assert!((t0[i] - t1[i]).abs() <= 1e-10 * (1.0 + t0[i].abs()), "{} {}", t0[i], t1[i]);
            prop_assert!((l0[i] - l1[i]).norm() <= 1e-10 * (1.0 + l0[i].norm()));
        }
    }
}
