//! Closed-form local elasticity solutions used as references.

use nalgebra::Matrix2;

use crate::geometry::P2;
use crate::lps::Material;

/// u = (3x + 2y, −x + 2y).
pub fn patch(x: P2) -> P2 {
    P2::new(3.0 * x.x + 2.0 * x.y, -x.x + 2.0 * x.y)
}

pub const PATCH_DIV: f64 = 5.0;

pub fn patch_stress(m: &Material) -> Matrix2<f64> {
    Matrix2::new(5.0 * m.lambda + 6.0 * m.mu, m.mu, m.mu, 5.0 * m.lambda + 4.0 * m.mu)
}

/// Stress of a displacement gradient g (g[(i, j)] = ∂u_i/∂x_j).
pub fn stress_of_gradient(m: &Material, g: &Matrix2<f64>) -> Matrix2<f64> {
    Matrix2::identity() * (m.lambda * g.trace()) + (g + g.transpose()) * m.mu
}

/// u = (sin Ax sin Ay, −cos Ax cos Ay).
#[derive(Clone, Copy, Debug)]
pub struct Manufactured {
    pub a: f64,
    pub mat: Material,
}

impl Manufactured {
    pub fn u(&self, x: P2) -> P2 {
        let (sx, cx) = (self.a * x.x).sin_cos();
        let (sy, cy) = (self.a * x.y).sin_cos();
        P2::new(sx * sy, -cx * cy)
    }

    pub fn grad(&self, x: P2) -> Matrix2<f64> {
        let a = self.a;
        let (sx, cx) = (a * x.x).sin_cos();
        let (sy, cy) = (a * x.y).sin_cos();
        Matrix2::new(a * cx * sy, a * sx * cy, a * sx * cy, a * cx * sy)
    }

    pub fn div(&self, x: P2) -> f64 {
        self.grad(x).trace()
    }

    pub fn body_force(&self, x: P2) -> P2 {
        let k = 2.0 * (self.mat.lambda + 2.0 * self.mat.mu) * self.a * self.a;
        self.u(x) * k
    }

    pub fn stress(&self, x: P2) -> Matrix2<f64> {
        stress_of_gradient(&self.mat, &self.grad(x))
    }
}

/// Plane-strain Kirsch solution: traction-free hole of radius `a` under
/// uniaxial remote stress σ₀ along x.
#[derive(Clone, Copy, Debug)]
pub struct Hole {
    pub sigma0: f64,
    pub a: f64,
    pub mat: Material,
}

impl Hole {
    pub fn kappa(&self) -> f64 {
        let nu = self.mat.lambda / (2.0 * (self.mat.lambda + self.mat.mu));
        3.0 - 4.0 * nu
    }

    pub fn u(&self, x: P2) -> P2 {
        let r = x.norm();
        let t = x.y.atan2(x.x);
        let (a, k) = (self.a, self.kappa());
        let c = self.sigma0 * a / (8.0 * self.mat.mu);
        let ra = a / r;
        let ux = r / a * (k + 1.0) * t.cos() + 2.0 * ra * ((1.0 + k) * t.cos() + (3.0 * t).cos()) - 2.0 * ra.powi(3) * (3.0 * t).cos();
        let uy = r / a * (k - 3.0) * t.sin() + 2.0 * ra * ((1.0 - k) * t.sin() + (3.0 * t).sin()) - 2.0 * ra.powi(3) * (3.0 * t).sin();
        P2::new(ux, uy) * c
    }

    /// (σ_rr + σ_θθ) / (2(λ + μ)).
    pub fn div(&self, x: P2) -> f64 {
        let r2 = x.norm_squared();
        let c2 = (x.x * x.x - x.y * x.y) / r2;
        self.sigma0 * (1.0 - 2.0 * self.a * self.a * c2 / r2) / (2.0 * (self.mat.lambda + self.mat.mu))
    }
}

/// Thick cylinder under internal pressure: u = A x + B x / |x|².
#[derive(Clone, Copy, Debug)]
pub struct Disk {
    pub p0: f64,
    pub r0: f64,
    pub r1: f64,
    pub youngs: f64,
    pub nu: f64,
}

impl Disk {
    pub fn coefficients(&self) -> (f64, f64) {
        let Disk { p0, r0, r1, youngs: e, nu } = *self;
        let d = e * (r1 * r1 - r0 * r0);
        ((1.0 + nu) * (1.0 - 2.0 * nu) * p0 * r0 * r0 / d, (1.0 + nu) * p0 * r0 * r0 * r1 * r1 / d)
    }

    pub fn u(&self, x: P2) -> P2 {
        let (a, b) = self.coefficients();
        x * (a + b / x.norm_squared())
    }

    pub fn div(&self, _x: P2) -> f64 {
        2.0 * self.coefficients().0
    }
}

/// Circular inclusion (phase 1, r ≤ a) in a matrix (phase 2) under remote
/// hydrostatic stress P∞.
#[derive(Clone, Copy, Debug)]
pub struct Inclusion {
    pub p_inf: f64,
    pub a: f64,
    pub inner: Material,
    pub outer: Material,
}

impl Inclusion {
    /// (C_A, C_B, C_C).
    pub fn coefficients(&self) -> (f64, f64, f64) {
        let (l1, m1, l2, m2) = (self.inner.lambda, self.inner.mu, self.outer.lambda, self.outer.mu);
        let p = self.p_inf;
        let ca = p / (2.0 * (l1 + m1));
        let d = 2.0 * (l1 + m1) * (l2 + 2.0 * m2);
        (ca, p * (l1 + m1 + m2) / d, -p * self.a * self.a * (l1 - l2 + m1 - m2) / d)
    }

    pub fn inside(&self, x: P2) -> bool {
        x.norm() <= self.a
    }

    pub fn material_at(&self, x: P2) -> Material {
        if self.inside(x) {
            self.inner
        } else {
            self.outer
        }
    }

    pub fn u_r(&self, r: f64) -> f64 {
        let (ca, cb, cc) = self.coefficients();
        if r <= self.a {
            ca * r
        } else {
            cb * r + cc / r
        }
    }

    pub fn u(&self, x: P2) -> P2 {
        let (ca, cb, cc) = self.coefficients();
        if self.inside(x) {
            x * ca
        } else {
            x * (cb + cc / x.norm_squared())
        }
    }

    pub fn div(&self, x: P2) -> f64 {
        let (ca, cb, _) = self.coefficients();
        2.0 * if self.inside(x) { ca } else { cb }
    }
}
