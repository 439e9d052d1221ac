//! Robust rotation estimation: closed-form weighted alignment of difference
//! vectors through a 4×4 quaternion eigenproblem, wrapped in graduated
//! non-convexity for the truncated least squares cost.

use nalgebra::{Matrix3, Matrix4, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, RegError, Result};
use crate::geometry::{pure_quat, quat_omega1, quat_omega2, UnitQuaternion, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct RotationProblem {
    /// Source difference vectors, already multiplied by the scale estimate.
    pub a_bars: Vec<Vec3>,
    pub b_bars: Vec<Vec3>,
    pub beta_bars: Vec<f64>,
    pub cbar_sq: f64,
}

impl RotationProblem {
    pub fn new(a_bars: Vec<Vec3>, b_bars: Vec<Vec3>, beta_bars: Vec<f64>, cbar_sq: f64) -> Result<Self> {
        let k = a_bars.len();
        if k == 0 {
            return Err(RegError::TooFewMeasurements { needed: 1, got: 0 });
        }
        if b_bars.len() != k || beta_bars.len() != k {
            return Err(invalid("rotation problem vectors differ in length"));
        }
        if beta_bars.iter().any(|b| !(*b > 0.0) || !b.is_finite()) {
            return Err(invalid("beta_bars must be positive"));
        }
        let finite = |v: &Vec3| v.iter().all(|x| x.is_finite());
        if !a_bars.iter().all(finite) || !b_bars.iter().all(finite) {
            return Err(invalid("rotation problem vectors must be finite"));
        }
        if !(cbar_sq > 0.0) || !cbar_sq.is_finite() {
            return Err(invalid("cbar_sq must be positive"));
        }
        Ok(Self {
            a_bars,
            b_bars,
            beta_bars,
            cbar_sq,
        })
    }

    pub fn len(&self) -> usize {
        self.a_bars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a_bars.is_empty()
    }

    /// `‖b̄_k − R ā_k‖² / β̄_k²` for every k.
    pub fn residuals_sq(&self, r: &Matrix3<f64>) -> Vec<f64> {
        self.a_bars
            .iter()
            .zip(&self.b_bars)
            .zip(&self.beta_bars)
            .map(|((a, b), beta)| (b - r * a).norm_squared() / (beta * beta))
            .collect()
    }

    pub fn tls_cost(&self, r: &Matrix3<f64>) -> f64 {
        self.residuals_sq(r).iter().map(|x| x.min(self.cbar_sq)).sum()
    }

    /// Cost of the binary-cloned formulation for a given inlier assignment.
    pub fn qcqp_cost(&self, r: &Matrix3<f64>, theta: &[i8]) -> f64 {
        self.residuals_sq(r)
            .iter()
            .zip(theta)
            .map(|(r2, &t)| if t > 0 { *r2 } else { self.cbar_sq })
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HornSolution {
    pub rotation: UnitQuaternion,
    /// True when the top eigenvalue is (numerically) repeated, which happens
    /// when the weighted vectors are all parallel or absent.
    pub degenerate: bool,
}

/// Maximizes `Σ w_k b̄_kᵀ R ā_k`, equivalently minimizes
/// `Σ w_k ‖b̄_k − R ā_k‖²`, over rotations.
///
/// The bilinear form equals `qᵀ (Σ w_k Ω₁(b̂_k)ᵀ Ω₂(â_k)) q` in quaternion
/// coordinates, so the optimum is the top eigenvector of that 4×4 matrix.
pub fn horn_weighted(a_bars: &[Vec3], b_bars: &[Vec3], weights: &[f64]) -> HornSolution {
    let mut n = Matrix4::zeros();
    for ((a, b), &w) in a_bars.iter().zip(b_bars).zip(weights) {
        if w > 0.0 {
            n += quat_omega1(&pure_quat(b)).transpose() * quat_omega2(&pure_quat(a)) * w;
        }
    }
    let n = (n + n.transpose()) * 0.5;
    let eig = SymmetricEigen::new(n);
    let mut idx: Vec<usize> = (0..4).collect();
    idx.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let top = eig.eigenvalues[idx[0]];
    let gap = top - eig.eigenvalues[idx[1]];
    let scale = eig.eigenvalues.iter().map(|x| x.abs()).fold(0.0, f64::max);
    let v = eig.eigenvectors.column(idx[0]).into_owned();
    let rotation = UnitQuaternion::from_vector(&v).unwrap_or_else(|_| UnitQuaternion::identity());
    HornSolution {
        rotation,
        degenerate: scale == 0.0 || gap <= 1e-12 * scale,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GncOptions {
    pub mu_factor: f64,
    pub mu_stop: f64,
    /// Floor on the initial control parameter; guards only against underflow,
    /// since tiny noise bounds legitimately need a very small start.
    pub mu_min: f64,
    pub max_iterations: usize,
    pub binary_tol: f64,
}

impl Default for GncOptions {
    fn default() -> Self {
        Self {
            mu_factor: 1.4,
            mu_stop: 1e6,
            mu_min: 1e-30,
            max_iterations: 1000,
            binary_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationSolution {
    pub rotation: UnitQuaternion,
    /// `+1` for inliers, `−1` for outliers.
    pub theta: Vec<i8>,
    /// Binary-cloned cost `μ̂`; equals the truncated cost at `rotation`.
    pub cost: f64,
    pub gnc_iterations: usize,
    /// False when `max_iterations` ran out before the schedule finished.
    pub converged: bool,
    /// True when the final alignment had repeated top eigenvalue.
    pub degenerate: bool,
}

/// Truncated-quadratic weight minimizing the GNC surrogate at control `mu`.
pub fn gnc_tls_weight(r2: f64, mu: f64, cbar_sq: f64) -> f64 {
    if r2 <= mu / (mu + 1.0) * cbar_sq {
        1.0
    } else if r2 >= (mu + 1.0) / mu * cbar_sq {
        0.0
    } else {
        (cbar_sq.sqrt() * (mu * (mu + 1.0)).sqrt() / r2.sqrt() - mu).clamp(0.0, 1.0)
    }
}

/// GNC surrogate `Σ w r² + μ(1 − w)/(μ + w) c̄²`.
pub fn gnc_surrogate(r2: &[f64], w: &[f64], mu: f64, cbar_sq: f64) -> f64 {
    r2.iter()
        .zip(w)
        .map(|(r, w)| w * r + mu * (1.0 - w) / (mu + w) * cbar_sq)
        .sum()
}

fn weighted_horn(p: &RotationProblem, w: &[f64]) -> HornSolution {
    let scaled: Vec<f64> = w.iter().zip(&p.beta_bars).map(|(w, b)| w / (b * b)).collect();
    horn_weighted(&p.a_bars, &p.b_bars, &scaled)
}

/// Graduated non-convexity for the truncated least squares rotation cost.
///
/// Starts at the identity, anneals `μ` geometrically from
/// `c̄²/(2 r_max² − c̄²)` and alternates weight updates with weighted
/// alignment. The hard assignment (`w ≥ 0.5`) is then refined by re-solving
/// on the inliers and re-thresholding until the assignment is stable, so the
/// returned pair is a fixed point of that alternation.
pub fn solve_gnc_tls(p: &RotationProblem, opts: &GncOptions) -> Result<RotationSolution> {
    let k = p.len();
    if k < 2 {
        return Err(RegError::TooFewMeasurements { needed: 2, got: k });
    }
    let c2 = p.cbar_sq;
    let mut rot = UnitQuaternion::identity();
    let mut r2 = p.residuals_sq(&rot.to_rotation_matrix());
    let r_max2 = r2.iter().copied().fold(0.0, f64::max);
    let denom = 2.0 * r_max2 - c2;
    let mut mu = if denom > 0.0 { (c2 / denom).max(opts.mu_min) } else { opts.mu_stop };
    let mut w = vec![1.0; k];
    let mut iterations = 0;
    let mut converged = false;
    let mut degenerate = false;
    while iterations < opts.max_iterations {
        let new_w: Vec<f64> = r2.iter().map(|&r| gnc_tls_weight(r, mu, c2)).collect();
        debug_assert!({
            let before = gnc_surrogate(&r2, &w, mu, c2);
            let after = gnc_surrogate(&r2, &new_w, mu, c2);
            after <= before + 1e-9 * (1.0 + before.abs())
        });
        w = new_w;
        let h = weighted_horn(p, &w);
        let new_r2 = p.residuals_sq(&h.rotation.to_rotation_matrix());
        debug_assert!({
            let before = gnc_surrogate(&r2, &w, mu, c2);
            let after = gnc_surrogate(&new_r2, &w, mu, c2);
            after <= before + 1e-9 * (1.0 + before.abs())
        });
        rot = h.rotation;
        degenerate = h.degenerate;
        r2 = new_r2;
        iterations += 1;
        let binary = w.iter().all(|&x| x <= opts.binary_tol || x >= 1.0 - opts.binary_tol);
        if binary || mu >= opts.mu_stop {
            converged = true;
            break;
        }
        mu *= opts.mu_factor;
    }

    let mut theta: Vec<i8> = w.iter().map(|&x| if x >= 0.5 { 1 } else { -1 }).collect();
    for _ in 0..50 {
        if theta.iter().filter(|&&t| t > 0).count() < 2 {
            break;
        }
        let hard: Vec<f64> = theta.iter().map(|&t| if t > 0 { 1.0 } else { 0.0 }).collect();
        let h = weighted_horn(p, &hard);
        let cand_r = h.rotation.to_rotation_matrix();
        let cand_theta: Vec<i8> = p
            .residuals_sq(&cand_r)
            .iter()
            .map(|&r| if r <= c2 { 1 } else { -1 })
            .collect();
        // Accept only non-increasing cost; the loop is a descent method.
        if p.qcqp_cost(&cand_r, &cand_theta) > p.qcqp_cost(&rot.to_rotation_matrix(), &theta) {
            break;
        }
        rot = h.rotation;
        degenerate = h.degenerate;
        let stable = cand_theta == theta;
        theta = cand_theta;
        if stable {
            break;
        }
    }
    let rmat = rot.to_rotation_matrix();
    // Residual test defines the final assignment.
    theta = p.residuals_sq(&rmat).iter().map(|&r| if r <= c2 { 1 } else { -1 }).collect();
    Ok(RotationSolution {
        rotation: rot,
        cost: p.qcqp_cost(&rmat, &theta),
        theta,
        gnc_iterations: iterations,
        converged,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::geodesic_rotation_error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_rotation(rng: &mut impl Rng) -> UnitQuaternion {
        let v = nalgebra::Vector4::from_fn(|_, _| StandardNormal.sample(rng));
        UnitQuaternion::from_vector(&v).unwrap()
    }

    fn unit_ball(rng: &mut impl Rng) -> Vec3 {
        Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0))
    }

    /// Rotation problem with `k` vectors, `n_out` of them replaced by random
    /// vectors, isotropic noise of norm at most `noise`.
    fn instance(rng: &mut impl Rng, k: usize, n_out: usize, noise: f64) -> (RotationProblem, UnitQuaternion, Vec<bool>) {
        let q = random_rotation(rng);
        let r = q.to_rotation_matrix();
        let mut a = Vec::new();
        let mut b = Vec::new();
        let mut inl = Vec::new();
        for i in 0..k {
            let ai = unit_ball(rng);
            if i < n_out {
                a.push(ai);
                b.push(unit_ball(rng) * 2.0);
                inl.push(false);
            } else {
                let e = unit_ball(rng).normalize() * noise * rng.random::<f64>();
                a.push(ai);
                b.push(r * ai + e);
                inl.push(true);
            }
        }
        let beta = if noise > 0.0 { noise } else { 1e-3 };
        (RotationProblem::new(a, b, vec![beta; k], 1.0).unwrap(), q, inl)
    }

    #[test]
    fn horn_exact_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..50 {
            let (p, q, _) = instance(&mut rng, 6, 0, 0.0);
            let h = horn_weighted(&p.a_bars, &p.b_bars, &[1.0; 6]);
            assert!(!h.degenerate);
            let err = geodesic_rotation_error(&h.rotation.to_rotation_matrix(), &q.to_rotation_matrix());
            assert!(err < 1e-10, "err {err}");
        }
    }

    #[test]
    fn zero_weight_equals_omission() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (mut p, _, _) = instance(&mut rng, 8, 0, 0.05);
        p.b_bars[3] = Vec3::new(10.0, -4.0, 2.0);
        let mut w = vec![1.0; 8];
        w[3] = 0.0;
        let full = horn_weighted(&p.a_bars, &p.b_bars, &w).rotation;
        let mut a = p.a_bars.clone();
        let mut b = p.b_bars.clone();
        a.remove(3);
        b.remove(3);
        let dropped = horn_weighted(&a, &b, &[1.0; 7]).rotation;
        assert!(full.angle_to(&dropped) < 1e-12);
    }

    #[test]
    fn collinear_input_is_flagged() {
        let a = vec![Vec3::x(), Vec3::x() * 2.0];
        let h = horn_weighted(&a, &a, &[1.0, 1.0]);
        assert!(h.degenerate);
    }

    #[test]
    fn horn_beats_random_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..10 {
            let (p, _, _) = instance(&mut rng, 10, 4, 0.1);
            let w: Vec<f64> = (0..10).map(|_| rng.random::<f64>()).collect();
            let cost = |r: &Matrix3<f64>| -> f64 {
                (0..10).map(|k| w[k] * (p.b_bars[k] - r * p.a_bars[k]).norm_squared()).sum()
            };
            let best = cost(&horn_weighted(&p.a_bars, &p.b_bars, &w).rotation.to_rotation_matrix());
            for _ in 0..1000 {
                assert!(best <= cost(&random_rotation(&mut rng).to_rotation_matrix()) + 1e-12);
            }
        }
    }

    #[test]
    fn gnc_accurate_without_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let (p, q, _) = instance(&mut rng, 40, 0, 0.01);
        let sol = solve_gnc_tls(&p, &GncOptions::default()).unwrap();
        assert!(sol.rotation.angle_to(&q) < 1f64.to_radians());
        // Residuals near the bound may fall outside at the optimum, so compare
        // against the ground truth cost instead of the inlier flags.
        assert!(sol.cost <= p.tls_cost(&q.to_rotation_matrix()) + 1e-9);
    }

    #[test]
    fn gnc_handles_seventy_percent_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let mut ok = 0;
        for _ in 0..100 {
            let (p, q, _) = instance(&mut rng, 40, 28, 0.01);
            let sol = solve_gnc_tls(&p, &GncOptions::default()).unwrap();
            if sol.rotation.angle_to(&q) < 1f64.to_radians() {
                ok += 1;
            }
        }
        assert!(ok >= 90, "{ok}/100");
    }

    #[test]
    fn theta_consistent_with_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        for _ in 0..20 {
            let (p, _, _) = instance(&mut rng, 20, 8, 0.05);
            let sol = solve_gnc_tls(&p, &GncOptions::default()).unwrap();
            let r = sol.rotation.to_rotation_matrix();
            for (r2, t) in p.residuals_sq(&r).iter().zip(&sol.theta) {
                assert_eq!(*t > 0, *r2 <= p.cbar_sq);
            }
            assert!((sol.cost - p.tls_cost(&r)).abs() < 1e-9);
            let m = sol.rotation.to_rotation_matrix();
            assert!((m.transpose() * m - Matrix3::identity()).norm() < 1e-10);
        }
    }

    #[test]
    fn gnc_matches_binary_enumeration_on_small_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        for _ in 0..20 {
            let (p, _, _) = instance(&mut rng, 8, 3, 0.1);
            let sol = solve_gnc_tls(&p, &GncOptions::default()).unwrap();
            let mut best = f64::INFINITY;
            for mask in 0u32..256 {
                let w: Vec<f64> = (0..8).map(|k| f64::from(mask >> k & 1)).collect();
                let cost = if mask.count_ones() == 0 {
                    8.0 * p.cbar_sq
                } else {
                    let r = weighted_horn(&p, &w).rotation.to_rotation_matrix();
                    p.tls_cost(&r)
                };
                best = best.min(cost);
            }
            assert!(sol.cost <= best + 1e-6, "gnc {} vs enumerated {}", sol.cost, best);
        }
    }

    #[test]
    fn rejects_too_small_problems() {
        let p = RotationProblem::new(vec![Vec3::x()], vec![Vec3::x()], vec![1.0], 1.0).unwrap();
        assert!(solve_gnc_tls(&p, &GncOptions::default()).is_err());
        assert!(RotationProblem::new(vec![Vec3::x()], vec![Vec3::x()], vec![0.0], 1.0).is_err());
    }
}
