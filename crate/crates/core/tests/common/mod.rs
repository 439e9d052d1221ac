//! Reference implementations used as oracles. Each one is written from the
//! problem definition and avoids the library's solvers.
#![allow(dead_code)]

use certreg::certifier::RotatedData;
use certreg::rotation::RotationProblem;
use certreg::{UnitQuaternion, Vec3};
use nalgebra::{DMatrix, DVector, Matrix3, Vector4};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn tls_objective(s: f64, meas: &[f64], alphas: &[f64], cbar_sq: f64) -> f64 {
    meas.iter()
        .zip(alphas)
        .map(|(m, a)| ((s - m) / a).powi(2).min(cbar_sq))
        .sum()
}

/// Minimum scalar TLS cost by trying the weighted center of every subset.
pub fn scalar_tls_oracle(meas: &[f64], alphas: &[f64], cbar_sq: f64) -> f64 {
    let k = meas.len();
    let mut best = k as f64 * cbar_sq;
    for mask in 1u32..(1 << k) {
        let (mut w, mut ws) = (0.0, 0.0);
        for i in 0..k {
            if mask >> i & 1 == 1 {
                let wi = 1.0 / (alphas[i] * alphas[i]);
                w += wi;
                ws += wi * meas[i];
            }
        }
        best = best.min(tls_objective(ws / w, meas, alphas, cbar_sq));
    }
    best
}

/// Largest number of closed intervals `[s_k − c̄α_k, s_k + c̄α_k]` sharing a
/// point; the maximum is attained at some left endpoint.
pub fn consensus_oracle(meas: &[f64], alphas: &[f64], cbar_sq: f64) -> usize {
    let c = cbar_sq.sqrt();
    let lo: Vec<f64> = meas.iter().zip(alphas).map(|(m, a)| m - c * a).collect();
    let hi: Vec<f64> = meas.iter().zip(alphas).map(|(m, a)| m + c * a).collect();
    lo.iter()
        .map(|&x| (0..meas.len()).filter(|&k| lo[k] <= x && x <= hi[k]).count())
        .max()
        .unwrap_or(0)
}

/// Weighted orthogonal Procrustes by SVD: `argmax_R Σ w bᵀRa`.
pub fn kabsch(a: &[Vec3], b: &[Vec3], w: &[f64]) -> Matrix3<f64> {
    let mut h = Matrix3::zeros();
    for ((a, b), w) in a.iter().zip(b).zip(w) {
        h += b * a.transpose() * *w;
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let d = (u * vt).determinant().signum();
    u * Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * vt
}

/// Global minimum of the binary-cloned rotation cost by enumerating every
/// inlier assignment and solving each with Procrustes.
pub fn rotation_oracle(p: &RotationProblem) -> (f64, Matrix3<f64>, Vec<i8>) {
    let k = p.len();
    assert!(k <= 14, "enumeration oracle is exponential");
    let mut best = (k as f64 * p.cbar_sq, Matrix3::identity(), vec![-1i8; k]);
    for mask in 1u32..(1 << k) {
        let theta: Vec<i8> = (0..k).map(|i| if mask >> i & 1 == 1 { 1 } else { -1 }).collect();
        let w: Vec<f64> = (0..k)
            .map(|i| if theta[i] > 0 { 1.0 / p.beta_bars[i].powi(2) } else { 0.0 })
            .collect();
        let r = kabsch(&p.a_bars, &p.b_bars, &w);
        let cost: f64 = (0..k)
            .map(|i| {
                if theta[i] > 0 {
                    (p.b_bars[i] - r * p.a_bars[i]).norm_squared() / p.beta_bars[i].powi(2)
                } else {
                    p.cbar_sq
                }
            })
            .sum();
        if cost < best.0 {
            best = (cost, r, theta);
        }
    }
    best
}

/// Euclidean projection onto `{M : M x̄ = 0, M − Q̄ + μ̂J ∈ H, M = Mᵀ}` from an
/// explicit constraint matrix `C`: `x − Cᵀ(CCᵀ)⁺(Cx − d)`.
pub fn dense_affine_projection(m: &DMatrix<f64>, rd: &RotatedData) -> DMatrix<f64> {
    let n = m.nrows();
    let nb = n / 4;
    let idx = |r: usize, c: usize| r + c * n;
    let mut offset = rd.qbar.clone();
    for d in 0..4 {
        offset[(d, d)] -= rd.mu_hat;
    }
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            rows.push(vec![(idx(a, b), 1.0), (idx(b, a), -1.0)]);
            rhs.push(0.0);
        }
    }
    for a in 0..n {
        rows.push((0..n).filter(|&b| rd.xbar[b] != 0.0).map(|b| (idx(a, b), rd.xbar[b])).collect());
        rhs.push(0.0);
    }
    // Diagonal blocks of M − Q̄ + μ̂J sum to zero.
    for a in 0..4 {
        for b in 0..4 {
            rows.push((0..nb).map(|k| (idx(4 * k + a, 4 * k + b), 1.0)).collect());
            rhs.push((0..nb).map(|k| offset[(4 * k + a, 4 * k + b)]).sum());
        }
    }
    // Off-diagonal blocks of M − Q̄ + μ̂J are skew.
    for i in 0..nb {
        for j in i + 1..nb {
            for a in 0..4 {
                for b in a..4 {
                    let (r1, c1, r2, c2) = (4 * i + a, 4 * j + b, 4 * i + b, 4 * j + a);
                    let mut row = vec![(idx(r1, c1), 1.0)];
                    if (r1, c1) == (r2, c2) {
                        row[0].1 = 2.0;
                    } else {
                        row.push((idx(r2, c2), 1.0));
                    }
                    rows.push(row);
                    rhs.push(offset[(r1, c1)] + offset[(r2, c2)]);
                }
            }
        }
    }
    let mut c = DMatrix::zeros(rows.len(), n * n);
    for (r, row) in rows.iter().enumerate() {
        for &(col, v) in row {
            c[(r, col)] += v;
        }
    }
    let x = DVector::from_column_slice(m.as_slice());
    let resid = &c * &x - DVector::from_vec(rhs);
    // Minimum-norm correction through the Gram matrix; redundant rows give
    // zero eigenvalues, which are dropped.
    let gram = (&c * c.transpose()).symmetric_eigen();
    let cut = 1e-10 * gram.eigenvalues.amax();
    let coeff = gram.eigenvectors.transpose() * resid;
    let coeff = DVector::from_iterator(
        coeff.len(),
        coeff.iter().zip(gram.eigenvalues.iter()).map(|(v, &l)| if l > cut { v / l } else { 0.0 }),
    );
    let y = x - c.transpose() * (&gram.eigenvectors * coeff);
    DMatrix::from_column_slice(n, n, y.as_slice())
}

pub fn random_quat(rng: &mut impl Rng) -> UnitQuaternion {
    UnitQuaternion::from_vector(&Vector4::from_fn(|_, _| StandardNormal.sample(rng))).unwrap()
}

pub fn random_vec(rng: &mut impl Rng, half_width: f64) -> Vec3 {
    Vec3::from_fn(|_, _| rng.random_range(-half_width..half_width))
}

/// Gaussian noise with standard deviation `sigma`, resampled until its
/// norm is at most `bound`.
pub fn bounded_noise(rng: &mut impl Rng, sigma: f64, bound: f64) -> Vec3 {
    loop {
        let e = Vec3::from_fn(|_, _| StandardNormal.sample(rng)) * sigma;
        if e.norm() <= bound {
            return e;
        }
    }
}

/// Rotation problem with `k` measurements whose first `n_out` entries are
/// replaced by random vectors. Returns the problem and the true rotation.
pub fn rotation_instance(
    rng: &mut impl Rng,
    k: usize,
    n_out: usize,
    sigma: f64,
    beta: f64,
) -> (RotationProblem, UnitQuaternion) {
    let q = random_quat(rng);
    let r = q.to_rotation_matrix();
    let mut a = Vec::with_capacity(k);
    let mut b = Vec::with_capacity(k);
    for i in 0..k {
        let ai: Vec3 = Vec3::from_fn(|_, _| StandardNormal.sample(rng));
        let ai = ai.normalize();
        a.push(ai);
        if i < n_out {
            b.push(Vec3::from_fn(|_, _| StandardNormal.sample(rng)).normalize() * rng.random_range(0.5..2.0));
        } else {
            b.push(r * ai + bounded_noise(rng, sigma, beta));
        }
    }
    (RotationProblem::new(a, b, vec![beta; k], 1.0).unwrap(), q)
}

/// Maps `f` over `items` on all available cores, preserving order.
pub fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<R>>> = items.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                *slots[i].lock().unwrap() = Some(f(item));
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().unwrap().unwrap()).collect()
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

pub fn report(name: &str, pass: bool, detail: &str) {
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
}
