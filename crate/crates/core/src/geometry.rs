//! Shared geometric types: points, unit quaternions in `[x, y, z, w]` layout,
//! similarity transforms, correspondence sets, and the chi-square helper used
//! to turn a noise standard deviation into an inlier bound.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, RegError, Result};

/// A 3-vector used both as a point and as a direction.
pub type Vec3 = Vector3<f64>;

/// Tolerance used when checking that a quaternion has unit norm.
pub const QUAT_NORM_TOL: f64 = 1e-12;

/// Unit quaternion stored as `[q1, q2, q3, q4]` with the vector part first
/// and the scalar part last.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitQuaternion {
    coords: [f64; 4],
}

impl UnitQuaternion {
    /// Builds a quaternion and renormalizes it. Rejects zero or non-finite input.
    pub fn new(q1: f64, q2: f64, q3: f64, q4: f64) -> Result<Self> {
        Self::from_vector(&Vector4::new(q1, q2, q3, q4))
    }

    pub fn from_vector(v: &Vector4<f64>) -> Result<Self> {
        let n = v.norm();
        if !n.is_finite() || n < 1e-300 {
            return Err(invalid("quaternion must be finite and nonzero"));
        }
        let u = v / n;
        Ok(Self {
            coords: [u[0], u[1], u[2], u[3]],
        })
    }

    pub fn identity() -> Self {
        Self {
            coords: [0.0, 0.0, 0.0, 1.0],
        }
    }

    /// Rotation of `angle` radians about `axis` (need not be normalized).
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Result<Self> {
        let n = axis.norm();
        if !(n > 0.0) || !angle.is_finite() {
            return Err(invalid("axis must be nonzero and angle finite"));
        }
        let (s, c) = (0.5 * angle).sin_cos();
        let v = axis * (s / n);
        Self::new(v.x, v.y, v.z, c)
    }

    /// Converts an orthonormal matrix with determinant +1 (Shepperd's method).
    pub fn from_rotation_matrix(r: &Matrix3<f64>) -> Result<Self> {
        let tr = r.trace();
        let (x, y, z, w);
        if tr > r[(0, 0)].max(r[(1, 1)]).max(r[(2, 2)]) {
            let s = 2.0 * (1.0 + tr).sqrt();
            w = 0.25 * s;
            x = (r[(2, 1)] - r[(1, 2)]) / s;
            y = (r[(0, 2)] - r[(2, 0)]) / s;
            z = (r[(1, 0)] - r[(0, 1)]) / s;
        } else if r[(0, 0)] >= r[(1, 1)] && r[(0, 0)] >= r[(2, 2)] {
            let s = 2.0 * (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt();
            x = 0.25 * s;
            w = (r[(2, 1)] - r[(1, 2)]) / s;
            y = (r[(0, 1)] + r[(1, 0)]) / s;
            z = (r[(0, 2)] + r[(2, 0)]) / s;
        } else if r[(1, 1)] >= r[(2, 2)] {
            let s = 2.0 * (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt();
            y = 0.25 * s;
            w = (r[(0, 2)] - r[(2, 0)]) / s;
            x = (r[(0, 1)] + r[(1, 0)]) / s;
            z = (r[(1, 2)] + r[(2, 1)]) / s;
        } else {
            let s = 2.0 * (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt();
            z = 0.25 * s;
            w = (r[(1, 0)] - r[(0, 1)]) / s;
            x = (r[(0, 2)] + r[(2, 0)]) / s;
            y = (r[(1, 2)] + r[(2, 1)]) / s;
        }
        Self::new(x, y, z, w)
    }

    pub fn coords(&self) -> Vector4<f64> {
        Vector4::from(self.coords)
    }

    pub fn vector_part(&self) -> Vec3 {
        Vec3::new(self.coords[0], self.coords[1], self.coords[2])
    }

    pub fn scalar_part(&self) -> f64 {
        self.coords[3]
    }

    pub fn inverse(&self) -> Self {
        let [x, y, z, w] = self.coords;
        Self {
            coords: [-x, -y, -z, w],
        }
    }

    /// Quaternion product `self ∘ other`.
    pub fn compose(&self, other: &Self) -> Self {
        let p = quat_omega1(&self.coords()) * other.coords();
        // Product of unit quaternions is unit up to round-off.
        Self::from_vector(&p).expect("product of unit quaternions is nonzero")
    }

    pub fn to_rotation_matrix(&self) -> Matrix3<f64> {
        let v = self.vector_part();
        let s = self.scalar_part();
        Matrix3::identity() * (s * s - v.dot(&v)) + v * v.transpose() * 2.0 + skew(&v) * (2.0 * s)
    }

    /// Rotates `p` by conjugation `q ∘ [p; 0] ∘ q⁻¹`.
    pub fn rotate(&self, p: &Vec3) -> Vec3 {
        let ph = Vector4::new(p.x, p.y, p.z, 0.0);
        let qi = self.inverse().coords();
        let r = quat_omega2(&qi) * (quat_omega1(&self.coords()) * ph);
        Vec3::new(r[0], r[1], r[2])
    }

    pub fn angle_to(&self, other: &Self) -> f64 {
        geodesic_rotation_error(&self.to_rotation_matrix(), &other.to_rotation_matrix())
    }
}

/// Left-multiplication matrix: `q ∘ p = Ω₁(q) p`. Accepts any 4-vector so it
/// can also be applied to homogenized points `[v; 0]`.
pub fn quat_omega1(q: &Vector4<f64>) -> Matrix4<f64> {
    let (q1, q2, q3, q4) = (q[0], q[1], q[2], q[3]);
    Matrix4::new(
        q4, -q3, q2, q1, //
        q3, q4, -q1, q2, //
        -q2, q1, q4, q3, //
        -q1, -q2, -q3, q4,
    )
}

/// Right-multiplication matrix: `p ∘ q = Ω₂(q) p`.
pub fn quat_omega2(q: &Vector4<f64>) -> Matrix4<f64> {
    let (q1, q2, q3, q4) = (q[0], q[1], q[2], q[3]);
    Matrix4::new(
        q4, q3, -q2, q1, //
        -q3, q4, q1, q2, //
        q2, -q1, q4, q3, //
        -q1, -q2, -q3, q4,
    )
}

/// Homogenizes a 3-vector as a pure quaternion `[v; 0]`.
pub fn pure_quat(v: &Vec3) -> Vector4<f64> {
    Vector4::new(v.x, v.y, v.z, 0.0)
}

/// Cross-product matrix: `skew(a) * b = a × b`.
pub fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Angle of the relative rotation `Raᵀ Rb`, in `[0, π]`.
///
/// Uses `atan2(sin, cos)` built from the skew and trace parts, which keeps
/// full precision for tiny angles where `acos` saturates.
pub fn geodesic_rotation_error(ra: &Matrix3<f64>, rb: &Matrix3<f64>) -> f64 {
    let rel = ra.transpose() * rb;
    let cos = ((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let w = Vec3::new(
        rel[(2, 1)] - rel[(1, 2)],
        rel[(0, 2)] - rel[(2, 0)],
        rel[(1, 0)] - rel[(0, 1)],
    );
    let sin = (0.5 * w.norm()).min(1.0);
    sin.atan2(cos)
}

/// Similarity transform `x ↦ s R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub scale: f64,
    pub rotation: UnitQuaternion,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn new(scale: f64, rotation: UnitQuaternion, translation: Vec3) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(invalid(format!("scale must be positive and finite, got {scale}")));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(invalid("translation must be finite"));
        }
        Ok(Self {
            scale,
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix()
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation_matrix() * p * self.scale + self.translation
    }
}

/// Putative correspondences `(a_i, b_i)` with per-correspondence noise bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    pub source: Vec<Vec3>,
    pub target: Vec<Vec3>,
    pub noise_bounds: Vec<f64>,
}

impl CorrespondenceSet {
    pub fn new(source: Vec<Vec3>, target: Vec<Vec3>, noise_bounds: Vec<f64>) -> Result<Self> {
        let n = source.len();
        if n == 0 {
            return Err(RegError::TooFewMeasurements { needed: 1, got: 0 });
        }
        if target.len() != n || noise_bounds.len() != n {
            return Err(invalid(format!(
                "length mismatch: {} source, {} target, {} bounds",
                n,
                target.len(),
                noise_bounds.len()
            )));
        }
        let finite = |p: &Vec3| p.iter().all(|v| v.is_finite());
        if let Some(i) = source.iter().position(|p| !finite(p)) {
            return Err(invalid(format!("source point {i} is not finite")));
        }
        if let Some(i) = target.iter().position(|p| !finite(p)) {
            return Err(invalid(format!("target point {i} is not finite")));
        }
        if let Some(i) = noise_bounds.iter().position(|b| !(*b > 0.0) || !b.is_finite()) {
            return Err(invalid(format!("noise bound {i} must be positive")));
        }
        Ok(Self {
            source,
            target,
            noise_bounds,
        })
    }

    pub fn with_uniform_bound(source: Vec<Vec3>, target: Vec<Vec3>, beta: f64) -> Result<Self> {
        let n = source.len();
        Self::new(source, target, vec![beta; n])
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }
}

/// Truncation threshold and noise quantile settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TlsConfig {
    pub cbar_sq: f64,
    pub noise_quantile_p: f64,
}

impl Default for TlsConfig {
    fn default() -> Self {
        Self {
            cbar_sq: 1.0,
            noise_quantile_p: 0.97,
        }
    }
}

impl TlsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cbar_sq > 0.0) || !self.cbar_sq.is_finite() {
            return Err(invalid("cbar_sq must be positive"));
        }
        if !(self.noise_quantile_p > 0.0 && self.noise_quantile_p < 1.0) {
            return Err(invalid("noise_quantile_p must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn cbar(&self) -> f64 {
        self.cbar_sq.sqrt()
    }
}

/// Inlier bound `β` such that `P(‖ε‖ ≤ β) = p` for `ε ~ N(0, σ² I₃)`.
pub fn beta_from_sigma(sigma: f64, p: f64) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(invalid("sigma must be positive"));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(invalid("p must lie in (0, 1)"));
    }
    Ok(sigma * chi2_quantile(3.0, p).sqrt())
}

/// Quantile of the chi-square distribution, by bisection on its CDF.
pub fn chi2_quantile(dof: f64, p: f64) -> f64 {
    let cdf = |x: f64| regularized_gamma_p(0.5 * dof, 0.5 * x);
    let mut hi = dof.max(1.0);
    while cdf(hi) < p {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Regularized lower incomplete gamma `P(a, x)`: series below `a + 1`,
/// Lentz continued fraction for the upper tail above it.
pub fn regularized_gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let log_prefix = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..1000 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-16 {
                break;
            }
        }
        (sum.ln() + log_prefix).exp()
    } else {
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..1000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        1.0 - (h.ln() + log_prefix).exp()
    }
}

/// Lanczos approximation (g = 7, n = 9) of `ln Γ(x)` for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = C[0];
    for (i, c) in C.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}
