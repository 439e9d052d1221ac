//! Global optimality certificates for truncated least squares rotation
//! estimates.
//!
//! The rotation problem with binary inlier variables is written as a QCQP in
//! the stacked vector `x = [q; θ₁q; …; θ_K q]` with cost matrix `Q`. A
//! candidate `x̂` is certified by finding a positive semidefinite matrix in
//! the affine set
//!
//! `L̄ = { M : M x̄ = 0, M − Q̄ + μ̂J ∈ H }`
//!
//! where everything is expressed in coordinates rotated by the candidate
//! quaternion, `x̄ = [1, θ₁, …, θ_K] ⊗ e`, and `H` holds the matrices whose
//! diagonal 4×4 blocks sum to zero and whose off-diagonal blocks are skew.
//! Douglas–Rachford splitting alternates projections onto the PSD cone and
//! onto `L̄`; any member `M` of `L̄` gives the bound
//! `(μ̂ − μ⋆)/μ̂ ≤ |λ_min(M)|(K + 1)/μ̂`.
//!
//! Measurements are normalized by their bounds (`ā/β̄`, `b̄/β̄`) before any
//! block formula is evaluated, so every closed form below is written for
//! unit bounds.

use faer::{Mat, MatRef, Side};
use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{pure_quat, quat_omega1, quat_omega2, skew, UnitQuaternion, Vec3};
use crate::rotation::RotationProblem;

/// Candidates whose cost is below this multiple of `c̄²` are optimal up to
/// round-off, because the objective is a sum of nonnegative terms.
pub const ZERO_COST_TOL: f64 = 1e-12;
/// Largest `‖Σ_k θ_k g_k‖` (normalized units) tolerated before a candidate
/// is reported as not stationary.
pub const STATIONARITY_TOL: f64 = 1e-6;

const E4: Vector4<f64> = Vector4::new(0.0, 0.0, 0.0, 1.0);

/// Cost matrix of the binary-cloned formulation, `4(K+1)` square.
#[derive(Debug, Clone, PartialEq)]
pub struct QcqpData {
    pub q: DMatrix<f64>,
    pub k: usize,
}

impl QcqpData {
    pub fn block(&self, i: usize, j: usize) -> Matrix4<f64> {
        block(&self.q, i, j)
    }
}

fn block(m: &DMatrix<f64>, i: usize, j: usize) -> Matrix4<f64> {
    m.fixed_view::<4, 4>(4 * i, 4 * j).into_owned()
}

fn set_block(m: &mut DMatrix<f64>, i: usize, j: usize, b: &Matrix4<f64>) {
    m.fixed_view_mut::<4, 4>(4 * i, 4 * j).copy_from(b);
}

/// Per-measurement blocks `(Q_kk, Q_0k)`.
fn measurement_blocks(a: &Vec3, b: &Vec3, beta: f64, cbar_sq: f64) -> (Matrix4<f64>, Matrix4<f64>) {
    let base = (Matrix4::identity() * (a.norm_squared() + b.norm_squared())
        + quat_omega1(&pure_quat(b)) * quat_omega2(&pure_quat(a)) * 2.0)
        / (beta * beta);
    let qkk = base * 0.5 + Matrix4::identity() * (0.5 * cbar_sq);
    let q0k = base * 0.25 - Matrix4::identity() * (0.25 * cbar_sq);
    (qkk, q0k)
}

/// Assembles `Q` so that `xᵀQx = Σ_k [(1+θ_k)/2 · r_k²/β̄_k² + (1−θ_k)/2 · c̄²]`
/// for `x = [q; θ₁q; …]`. Only the `(0,k)`, `(k,0)` and `(k,k)` blocks are
/// nonzero.
pub fn build_q(p: &RotationProblem) -> QcqpData {
    let k = p.len();
    let mut q = DMatrix::zeros(4 * (k + 1), 4 * (k + 1));
    for i in 0..k {
        let (qkk, q0k) = measurement_blocks(&p.a_bars[i], &p.b_bars[i], p.beta_bars[i], p.cbar_sq);
        set_block(&mut q, i + 1, i + 1, &qkk);
        set_block(&mut q, 0, i + 1, &q0k);
        set_block(&mut q, i + 1, 0, &q0k.transpose());
    }
    QcqpData { q, k }
}

/// Stacked vector `[q; θ₁q; …; θ_K q]`.
pub fn stacked_vector(q: &UnitQuaternion, thetas: &[i8]) -> DVector<f64> {
    let qc = q.coords();
    let mut x = DVector::zeros(4 * (thetas.len() + 1));
    x.fixed_rows_mut::<4>(0).copy_from(&qc);
    for (k, &t) in thetas.iter().enumerate() {
        x.fixed_rows_mut::<4>(4 * (k + 1)).copy_from(&(qc * f64::from(t)));
    }
    x
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSolution {
    pub q_hat: UnitQuaternion,
    pub thetas: Vec<i8>,
    pub mu_hat: f64,
}

impl CandidateSolution {
    /// Computes `μ̂ = x̂ᵀ Q x̂` from the residuals.
    pub fn new(p: &RotationProblem, q_hat: UnitQuaternion, thetas: Vec<i8>) -> Result<Self> {
        if thetas.len() != p.len() {
            return Err(invalid("theta length differs from the number of measurements"));
        }
        if thetas.iter().any(|&t| t != 1 && t != -1) {
            return Err(invalid("theta entries must be +1 or -1"));
        }
        let mu_hat = p.qcqp_cost(&q_hat.to_rotation_matrix(), &thetas);
        Ok(Self { q_hat, thetas, mu_hat })
    }
}

/// Problem data in coordinates rotated by the candidate quaternion.
#[derive(Debug, Clone)]
pub struct RotatedData {
    pub k: usize,
    pub qbar: DMatrix<f64>,
    pub xbar: DVector<f64>,
    /// `[1, θ₁, …, θ_K]`.
    pub thetas: Vec<f64>,
    pub mu_hat: f64,
    pub cbar_sq: f64,
    /// Normalized residuals `R̂ᵀ(b̄_k − R̂ā_k)/β̄_k`, one per measurement.
    pub xi: Vec<Vec3>,
    /// Normalized `ā_k/β̄_k`, one per measurement.
    pub a_n: Vec<Vec3>,
    /// Fixed diagonal vector parts for blocks `0..=K`.
    pub phi: Vec<Vec3>,
    /// Fixed diagonal scalar parts for blocks `0..=K`.
    pub s_diag: Vec<f64>,
    /// `‖Σ_k θ_k g_k‖` in the vector rows; zero for stationary candidates.
    pub stationarity_violation: f64,
    pairs: Vec<(usize, usize)>,
}

impl RotatedData {
    pub fn dim(&self) -> usize {
        4 * (self.k + 1)
    }

    pub fn is_stationary(&self) -> bool {
        self.stationarity_violation <= STATIONARITY_TOL
    }

    fn mu_j(&self) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.dim(), self.dim());
        for d in 0..4 {
            j[(d, d)] = self.mu_hat;
        }
        j
    }
}

/// Upper block pairs `(r, c)`, `r < c`, in the order
/// `(0,1) … (0,K), (1,2) … (K−1,K)`.
pub fn block_pairs(k: usize) -> Vec<(usize, usize)> {
    let n = k + 1;
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for r in 0..n {
        for c in r + 1..n {
            out.push((r, c));
        }
    }
    out
}

/// Position of pair `(r, c)`, `r < c`, in [`block_pairs`].
pub fn pair_index(k: usize, r: usize, c: usize) -> usize {
    debug_assert!(r < c && c <= k);
    r * k - r * r.saturating_sub(1) / 2 + c - r - 1
}

/// Transforms `Q` and the candidate into rotated coordinates and computes the
/// fixed parts of the affine set.
pub fn rotate_problem(p: &RotationProblem, q: &QcqpData, c: &CandidateSolution) -> RotatedData {
    let k = q.k;
    let om = quat_omega1(&c.q_hat.coords());
    let omt = om.transpose();
    let n = 4 * (k + 1);
    let mut qbar = DMatrix::zeros(n, n);
    for i in 1..=k {
        set_block(&mut qbar, i, i, &(omt * q.block(i, i) * om));
        let b0 = omt * q.block(0, i) * om;
        set_block(&mut qbar, 0, i, &b0);
        set_block(&mut qbar, i, 0, &b0.transpose());
    }
    let thetas: Vec<f64> = std::iter::once(1.0)
        .chain(c.thetas.iter().map(|&t| f64::from(t)))
        .collect();
    let mut xbar = DVector::zeros(n);
    for (i, t) in thetas.iter().enumerate() {
        xbar[4 * i + 3] = *t;
    }

    // g = −(Q̄ − μ̂J) x̄, block rows; Q̄ is an arrow so each row touches ≤ 2 blocks.
    let mut g: Vec<Vector4<f64>> = vec![Vector4::zeros(); k + 1];
    g[0] = E4 * c.mu_hat;
    for i in 1..=k {
        g[0] -= block(&qbar, 0, i) * E4 * thetas[i];
        g[i] = -(block(&qbar, i, 0) * E4 + block(&qbar, i, i) * E4 * thetas[i]);
    }
    let mut phi = vec![Vec3::zeros(); k + 1];
    let mut s_diag = vec![0.0; k + 1];
    for i in 1..=k {
        phi[i] = g[i].fixed_rows::<3>(0) * thetas[i];
        s_diag[i] = g[i][3] * thetas[i];
    }
    // Block 0 absorbs the negated sums so the Δ ∈ H constraint holds exactly.
    phi[0] = -phi[1..].iter().sum::<Vec3>();
    s_diag[0] = -s_diag[1..].iter().sum::<f64>();
    let violation = (g[0].fixed_rows::<3>(0).into_owned() - phi[0]).norm();

    let r = c.q_hat.to_rotation_matrix();
    let (mut xi, mut a_n) = (Vec::with_capacity(k), Vec::with_capacity(k));
    for i in 0..k {
        let beta = p.beta_bars[i];
        xi.push(r.transpose() * (p.b_bars[i] - r * p.a_bars[i]) / beta);
        a_n.push(p.a_bars[i] / beta);
    }
    RotatedData {
        k,
        qbar,
        xbar,
        thetas,
        mu_hat: c.mu_hat,
        cbar_sq: p.cbar_sq,
        xi,
        a_n,
        phi,
        s_diag,
        stationarity_violation: violation,
        pairs: block_pairs(k),
    }
}

/// Starting point `M̄⁽⁰⁾ = Q̄ − μ̂J + Δ₀` with zero off-diagonal blocks.
///
/// The diagonal matrix parts for `k ≥ 1` are
/// `−[Q̄]_0k − (¼θ_k + ¼)‖ξ_k‖² I − ½c̄² I` (upper-left 3×3 parts) and block 0
/// takes the negated sum. For noiseless outlier-free data the result is
/// already PSD with a single zero eigenvalue.
pub fn initial_dual_guess(rd: &RotatedData) -> DMatrix<f64> {
    let k = rd.k;
    let mut delta = DMatrix::zeros(rd.dim(), rd.dim());
    let mut m0 = Matrix3::zeros();
    for i in 1..=k {
        let q0k = rd.qbar.fixed_view::<3, 3>(0, 4 * i).into_owned();
        let q0k = (q0k + q0k.transpose()) * 0.5;
        let t = rd.thetas[i];
        let m = -q0k
            - Matrix3::identity() * ((0.25 * t + 0.25) * rd.xi[i - 1].norm_squared() + 0.5 * rd.cbar_sq);
        m0 -= m;
        set_diag_block(&mut delta, i, &m, &rd.phi[i], rd.s_diag[i]);
    }
    set_diag_block(&mut delta, 0, &m0, &rd.phi[0], rd.s_diag[0]);
    &rd.qbar - rd.mu_j() + delta
}

fn set_diag_block(m: &mut DMatrix<f64>, i: usize, mm: &Matrix3<f64>, v: &Vec3, s: f64) {
    let o = 4 * i;
    m.fixed_view_mut::<3, 3>(o, o).copy_from(mm);
    m.fixed_view_mut::<3, 1>(o, o + 3).copy_from(v);
    m.fixed_view_mut::<1, 3>(o + 3, o).copy_from(&v.transpose());
    m[(o + 3, o + 3)] = s;
}

fn to_faer(m: &DMatrix<f64>) -> MatRef<'_, f64> {
    MatRef::from_column_major_slice(m.as_slice(), m.nrows(), m.ncols())
}

fn from_faer(m: MatRef<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Frobenius-nearest PSD matrix: clamps negative eigenvalues to zero.
pub fn project_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = to_faer(&sym)
        .self_adjoint_eigen(Side::Lower)
        .expect("symmetric eigendecomposition of a finite matrix");
    let s = eig.S().column_vector();
    let u = eig.U();
    let pos: Vec<usize> = (0..s.nrows()).filter(|&i| s[i] > 0.0).collect();
    let n = m.nrows();
    if pos.is_empty() {
        return DMatrix::zeros(n, n);
    }
    let b = Mat::<f64>::from_fn(n, pos.len(), |i, j| u[(i, pos[j])] * s[pos[j]].sqrt());
    let out = &b * b.transpose();
    let mut r = from_faer(out.as_ref());
    // Exact symmetry keeps later block projections free of drift.
    r = (&r + r.transpose()) * 0.5;
    r
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    let ev = to_faer(&sym)
        .self_adjoint_eigenvalues(Side::Lower)
        .expect("symmetric eigenvalues of a finite matrix");
    ev.first().copied().unwrap_or(0.0)
}

/// Row `l` of the normal-equation matrix for the off-diagonal vector parts,
/// as `(column, coefficient)` pairs without the diagonal entry 4.
fn a_row(k: usize, theta: &[f64], r: usize, c: usize, out: &mut Vec<(usize, f64)>) {
    out.clear();
    let n = k + 1;
    for i in 0..r {
        out.push((pair_index(k, i, r), -theta[c] * theta[i]));
    }
    for i in r + 1..n {
        if i != c {
            out.push((pair_index(k, r, i), theta[c] * theta[i]));
        }
    }
    for i in 0..c {
        if i != r {
            out.push((pair_index(k, i, c), theta[r] * theta[i]));
        }
    }
    for i in c + 1..n {
        out.push((pair_index(k, c, i), -theta[r] * theta[i]));
    }
}

/// Dense `A` (size `L = K(K+1)/2`), for tests and diagnostics.
pub fn assemble_a(k: usize, theta: &[f64]) -> DMatrix<f64> {
    let pairs = block_pairs(k);
    let mut a = DMatrix::identity(pairs.len(), pairs.len()) * 4.0;
    let mut row = Vec::new();
    for (l, &(r, c)) in pairs.iter().enumerate() {
        a_row(k, theta, r, c, &mut row);
        for &(col, v) in &row {
            a[(l, col)] += v;
        }
    }
    a
}

/// Closed-form inverse of `A`: `p₁ I − p₂ (A − 4I)` with
/// `p₁ = (K+1)/(2K+6)` and `p₂ = 1/(2K+6)`.
pub fn assemble_p(k: usize, theta: &[f64]) -> DMatrix<f64> {
    let (p1, p2) = p_coefficients(k);
    let l = k * (k + 1) / 2;
    let a = assemble_a(k, theta);
    DMatrix::identity(l, l) * p1 - (a - DMatrix::identity(l, l) * 4.0) * p2
}

fn p_coefficients(k: usize) -> (f64, f64) {
    let d = 2.0 * k as f64 + 6.0;
    ((k as f64 + 1.0) / d, 1.0 / d)
}

/// Frobenius projection onto `L̄` (exact for stationary candidates; otherwise
/// onto the subset that keeps `Δ ∈ H` and drops block row 0 of `M x̄ = 0`).
pub fn project_affine(m: &DMatrix<f64>, rd: &RotatedData) -> DMatrix<f64> {
    let k = rd.k;
    let n1 = k + 1;
    let th = &rd.thetas;
    let mut h = m - &rd.qbar;
    for d in 0..4 {
        h[(d, d)] += rd.mu_hat;
    }
    let mut delta = DMatrix::zeros(rd.dim(), rd.dim());

    // Diagonal matrix parts: remove the mean.
    let diag_m: Vec<Matrix3<f64>> = (0..n1)
        .map(|i| {
            let b = h.fixed_view::<3, 3>(4 * i, 4 * i);
            (b + b.transpose()) * 0.5
        })
        .collect();
    let mean = diag_m.iter().sum::<Matrix3<f64>>() / n1 as f64;

    // Off-diagonal matrix parts: skew part; scalar parts stay zero.
    for &(r, c) in &rd.pairs {
        let b = h.fixed_view::<3, 3>(4 * r, 4 * c);
        let sk = (b - b.transpose()) * 0.5;
        delta.fixed_view_mut::<3, 3>(4 * r, 4 * c).copy_from(&sk);
        delta.fixed_view_mut::<3, 3>(4 * c, 4 * r).copy_from(&sk.transpose());
    }

    // Vector parts. Diagonal blocks contribute their column and row average.
    let hv = |i: usize, j: usize| -> Vec3 { h.fixed_view::<3, 1>(4 * i, 4 * j + 3).into_owned() };
    let hw = |i: usize, j: usize| -> Vec3 { h.fixed_view::<1, 3>(4 * i + 3, 4 * j).transpose() };
    let hd: Vec<Vec3> = (0..n1).map(|i| (hv(i, i) + hw(i, i)) * 0.5).collect();
    let f: Vec<Vec3> = rd
        .pairs
        .iter()
        .map(|&(r, c)| {
            let two_c = (hv(r, c) - hw(r, c) - hv(c, r) + hw(c, r)) * 0.5;
            two_c + (rd.phi[r] - rd.phi[c] - hd[r] + hd[c]) * (th[r] * th[c])
        })
        .collect();
    let (p1, p2) = p_coefficients(k);
    let mut row = Vec::new();
    let v: Vec<Vec3> = rd
        .pairs
        .iter()
        .enumerate()
        .map(|(l, &(r, c))| {
            a_row(k, th, r, c, &mut row);
            let bf: Vec3 = row.iter().map(|&(col, a)| f[col] * a).sum();
            f[l] * p1 - bf * p2
        })
        .collect();

    let mut vd = rd.phi.clone();
    for (l, &(r, c)) in rd.pairs.iter().enumerate() {
        let vl = v[l];
        delta.fixed_view_mut::<3, 1>(4 * r, 4 * c + 3).copy_from(&vl);
        delta.fixed_view_mut::<1, 3>(4 * r + 3, 4 * c).copy_from(&(-vl).transpose());
        delta.fixed_view_mut::<3, 1>(4 * c, 4 * r + 3).copy_from(&(-vl));
        delta.fixed_view_mut::<1, 3>(4 * c + 3, 4 * r).copy_from(&vl.transpose());
        vd[r] -= vl * (th[r] * th[c]);
        vd[c] += vl * (th[r] * th[c]);
    }
    for i in 0..n1 {
        set_diag_block(&mut delta, i, &(diag_m[i] - mean), &vd[i], rd.s_diag[i]);
    }
    &rd.qbar - rd.mu_j() + delta
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertifyOptions {
    pub max_iters: usize,
    pub eta_target: f64,
    /// Relaxation parameter in `(0, 2)`.
    pub gamma: f64,
    /// Stop when `‖M_L − M_S‖_F` falls below this.
    pub fixed_point_tol: f64,
    /// Reject at once when flipping one inlier flag lowers the cost.
    pub local_check: bool,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        Self {
            max_iters: 200,
            eta_target: 1e-3,
            gamma: 1.0,
            fixed_point_tol: 1e-10,
            local_check: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    /// `η` fell below the target.
    Certified,
    /// A strictly better feasible point was found, or the splitting reached a
    /// fixed point without producing a certificate.
    Suboptimal,
    /// The iteration budget ran out.
    BudgetExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    /// Upper bound on `(μ̂ − μ⋆)/μ̂`.
    pub eta: f64,
    pub iterations_used: usize,
    pub verdict: Verdict,
    /// `λ_min` of each iterate projected onto the affine set, starting with
    /// the initial guess.
    pub min_eigenvalue_trace: Vec<f64>,
    pub stationarity_violation: f64,
    pub mu_hat: f64,
}

impl Certificate {
    pub fn is_certified(&self) -> bool {
        self.verdict == Verdict::Certified
    }
}

/// Runs Douglas–Rachford splitting between the PSD cone and `L̄`, keeping the
/// best bound `η = |λ_min|(K+1)/μ̂` seen on the affine side.
pub fn certify(p: &RotationProblem, c: &CandidateSolution, opts: &CertifyOptions) -> Result<Certificate> {
    if c.thetas.len() != p.len() {
        return Err(invalid("candidate and problem sizes differ"));
    }
    if !c.mu_hat.is_finite() || !c.q_hat.coords().iter().all(|x| x.is_finite()) {
        return Err(invalid("candidate must be finite"));
    }
    if !(opts.gamma > 0.0 && opts.gamma < 2.0) {
        return Err(invalid("gamma must lie in (0, 2)"));
    }
    let k = p.len();
    let done = |eta, verdict, trace, viol| Certificate {
        eta,
        iterations_used: 0,
        verdict,
        min_eigenvalue_trace: trace,
        stationarity_violation: viol,
        mu_hat: c.mu_hat,
    };

    if opts.local_check {
        let r2 = p.residuals_sq(&c.q_hat.to_rotation_matrix());
        let tol = 1e-12 * p.cbar_sq;
        let improvable = r2
            .iter()
            .zip(&c.thetas)
            .any(|(&r, &t)| if t > 0 { r > p.cbar_sq + tol } else { r < p.cbar_sq - tol });
        if improvable {
            // μ⋆ ≥ 0, so a relative gap of 1 is always a valid bound.
            return Ok(done(1.0, Verdict::Suboptimal, Vec::new(), f64::NAN));
        }
    }
    if c.mu_hat <= ZERO_COST_TOL * p.cbar_sq {
        return Ok(done(0.0, Verdict::Certified, Vec::new(), 0.0));
    }

    let q = build_q(p);
    let rd = rotate_problem(p, &q, c);
    let scale = (k + 1) as f64 / c.mu_hat;
    let eta_of = |lambda: f64| (-lambda).max(0.0) * scale;

    let mut m = initial_dual_guess(&rd);
    let mut lambda = min_eigenvalue(&m);
    let mut trace = vec![lambda];
    let mut best = eta_of(lambda);
    let mut cert = done(best, Verdict::BudgetExhausted, Vec::new(), rd.stationarity_violation);
    if best < opts.eta_target {
        cert.verdict = Verdict::Certified;
        cert.min_eigenvalue_trace = trace;
        return Ok(cert);
    }
    for t in 1..=opts.max_iters {
        let ms = project_psd(&m);
        let ml = project_affine(&(&ms * 2.0 - &m), &rd);
        lambda = min_eigenvalue(&ml);
        trace.push(lambda);
        best = best.min(eta_of(lambda));
        cert.iterations_used = t;
        if best < opts.eta_target {
            cert.verdict = Verdict::Certified;
            break;
        }
        let diff = &ml - &ms;
        if diff.norm() < opts.fixed_point_tol {
            cert.verdict = Verdict::Suboptimal;
            break;
        }
        m += diff * opts.gamma;
    }
    cert.eta = best;
    cert.min_eigenvalue_trace = trace;
    Ok(cert)
}

/// Closed-form rotated blocks `([Q̄]_0k, [Q̄]_kk)` from normalized data.
pub fn rotated_blocks_closed_form(a: &Vec3, xi: &Vec3, cbar_sq: f64) -> (Matrix4<f64>, Matrix4<f64>) {
    let ax = skew(a);
    let xx = skew(xi);
    let ax2 = ax * ax;
    let n2 = xi.norm_squared();
    let at_xi = a.dot(xi);
    let i3 = Matrix3::identity();
    let cross = xx * a;
    let mut b0 = Matrix4::zeros();
    let m0 = -ax2 + i3 * (0.25 * (n2 - cbar_sq)) + i3 * (0.5 * at_xi) - xx * ax * 0.5 - xi * a.transpose() * 0.5;
    b0.fixed_view_mut::<3, 3>(0, 0).copy_from(&m0);
    b0.fixed_view_mut::<3, 1>(0, 3).copy_from(&(cross * 0.5));
    b0.fixed_view_mut::<1, 3>(3, 0).copy_from(&(cross * 0.5).transpose());
    b0[(3, 3)] = 0.25 * (n2 - cbar_sq);
    let mut bk = Matrix4::zeros();
    let mk = -ax2 * 2.0 + i3 * (0.5 * (n2 + cbar_sq)) + i3 * at_xi - xx * ax - xi * a.transpose();
    bk.fixed_view_mut::<3, 3>(0, 0).copy_from(&mk);
    bk.fixed_view_mut::<3, 1>(0, 3).copy_from(&cross);
    bk.fixed_view_mut::<1, 3>(3, 0).copy_from(&cross.transpose());
    bk[(3, 3)] = 0.5 * (n2 + cbar_sq);
    (b0, bk)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotation::horn_weighted;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_quat(rng: &mut impl Rng) -> UnitQuaternion {
        UnitQuaternion::from_vector(&Vector4::from_fn(|_, _| StandardNormal.sample(rng))).unwrap()
    }

    fn rand_vec(rng: &mut impl Rng, s: f64) -> Vec3 {
        Vec3::from_fn(|_, _| rng.random_range(-s..s))
    }

    /// Random problem plus a stationary candidate: random θ, rotation from
    /// weighted alignment of the θ = +1 set.
    fn stationary_instance(rng: &mut impl Rng, k: usize, noise: f64) -> (RotationProblem, CandidateSolution) {
        let q = random_quat(rng);
        let r = q.to_rotation_matrix();
        let mut a = Vec::new();
        let mut b = Vec::new();
        let mut betas = Vec::new();
        for i in 0..k {
            let ai = rand_vec(rng, 1.0);
            a.push(ai);
            b.push(if i % 3 == 2 { rand_vec(rng, 2.0) } else { r * ai + rand_vec(rng, noise) });
            betas.push(rng.random_range(0.05..0.2));
        }
        let p = RotationProblem::new(a, b, betas, 1.0).unwrap();
        let mut theta: Vec<i8> = (0..k).map(|i| if i % 3 == 2 { -1 } else { 1 }).collect();
        if rng.random_bool(0.5) && k > 2 {
            theta[0] = -1;
        }
        let w: Vec<f64> = theta
            .iter()
            .zip(&p.beta_bars)
            .map(|(&t, b)| if t > 0 { 1.0 / (b * b) } else { 0.0 })
            .collect();
        let qh = horn_weighted(&p.a_bars, &p.b_bars, &w).rotation;
        let c = CandidateSolution::new(&p, qh, theta).unwrap();
        (p, c)
    }

    #[test]
    fn pair_index_matches_enumeration() {
        for k in 1..9 {
            for (l, &(r, c)) in block_pairs(k).iter().enumerate() {
                assert_eq!(pair_index(k, r, c), l);
            }
        }
    }

    #[test]
    fn q_single_measurement_zero_residual() {
        let p = RotationProblem::new(vec![Vec3::x()], vec![Vec3::x()], vec![1.0], 1.0).unwrap();
        let q = build_q(&p);
        assert_eq!(q.q.nrows(), 8);
        assert_abs_diff_eq!(q.q.clone(), q.q.transpose(), epsilon = 1e-15);
        let x = stacked_vector(&UnitQuaternion::identity(), &[1]);
        assert_abs_diff_eq!((x.transpose() * &q.q * &x)[(0, 0)], 0.0, epsilon = 1e-15);
        let x = stacked_vector(&UnitQuaternion::identity(), &[-1]);
        assert_abs_diff_eq!((x.transpose() * &q.q * &x)[(0, 0)], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn quadratic_form_matches_mixed_integer_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let (p, _) = stationary_instance(&mut rng, 7, 0.05);
        let q = build_q(&p);
        for _ in 0..100 {
            let qq = random_quat(&mut rng);
            let th: Vec<i8> = (0..7).map(|_| if rng.random_bool(0.5) { 1 } else { -1 }).collect();
            let x = stacked_vector(&qq, &th);
            let direct = p.qcqp_cost(&qq.to_rotation_matrix(), &th);
            assert_abs_diff_eq!((x.transpose() * &q.q * &x)[(0, 0)], direct, epsilon = 1e-9 * (1.0 + direct));
        }
        let x = stacked_vector(&random_quat(&mut rng), &[-1; 7]);
        assert_abs_diff_eq!((x.transpose() * &q.q * &x)[(0, 0)], 7.0, epsilon = 1e-9);
    }

    #[test]
    fn rotation_preserves_spectrum_and_matches_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let (p, c) = stationary_instance(&mut rng, 6, 0.05);
        let q = build_q(&p);
        let rd = rotate_problem(&p, &q, &c);
        let e1 = q.q.clone().symmetric_eigenvalues();
        let e2 = rd.qbar.clone().symmetric_eigenvalues();
        let mut e1: Vec<f64> = e1.iter().copied().collect();
        let mut e2: Vec<f64> = e2.iter().copied().collect();
        e1.sort_by(f64::total_cmp);
        e2.sort_by(f64::total_cmp);
        for (x, y) in e1.iter().zip(&e2) {
            assert!((x - y).abs() < 1e-9 * (1.0 + x.abs()));
        }
        for i in 1..=6 {
            let (b0, bk) = rotated_blocks_closed_form(&rd.a_n[i - 1], &rd.xi[i - 1], p.cbar_sq);
            assert_abs_diff_eq!(block(&rd.qbar, 0, i), b0, epsilon = 1e-9);
            assert_abs_diff_eq!(block(&rd.qbar, i, i), bk, epsilon = 1e-9);
            // Fixed vector part in closed form.
            let t = rd.thetas[i];
            let want = -(rd.xi[i - 1].cross(&rd.a_n[i - 1])) * (0.5 * t + 1.0);
            assert_abs_diff_eq!(rd.phi[i], want, epsilon = 1e-9);
        }
        assert!(rd.is_stationary(), "violation {}", rd.stationarity_violation);
        assert_abs_diff_eq!((rd.xbar.transpose() * &rd.qbar * &rd.xbar)[(0, 0)], c.mu_hat, epsilon = 1e-9);
    }

    #[test]
    fn identity_candidate_leaves_q_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let (p, _) = stationary_instance(&mut rng, 4, 0.05);
        let c = CandidateSolution::new(&p, UnitQuaternion::identity(), vec![1; 4]).unwrap();
        let q = build_q(&p);
        let rd = rotate_problem(&p, &q, &c);
        assert_abs_diff_eq!(rd.qbar, q.q, epsilon = 1e-12);
    }

    #[test]
    fn initial_guess_is_in_the_affine_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        for k in [1, 2, 5, 9] {
            let (p, c) = stationary_instance(&mut rng, k, 0.05);
            let rd = rotate_problem(&p, &build_q(&p), &c);
            let m0 = initial_dual_guess(&rd);
            assert!((&m0 * &rd.xbar).norm() < 1e-8, "K = {k}");
            assert_abs_diff_eq!(project_affine(&m0, &rd), m0.clone(), epsilon = 1e-9);
        }
    }

    #[test]
    fn noiseless_initial_guess_is_psd_with_one_null_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let q = random_quat(&mut rng);
        let r = q.to_rotation_matrix();
        let a: Vec<Vec3> = (0..8).map(|_| rand_vec(&mut rng, 1.0)).collect();
        let b = a.iter().map(|x| r * x).collect();
        let p = RotationProblem::new(a, b, vec![0.1; 8], 1.0).unwrap();
        let c = CandidateSolution::new(&p, q, vec![1; 8]).unwrap();
        let rd = rotate_problem(&p, &build_q(&p), &c);
        let m0 = initial_dual_guess(&rd);
        let mut ev: Vec<f64> = m0.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        assert!(ev[0].abs() < 1e-9, "λ₁ = {}", ev[0]);
        assert!(ev[1] > 1e-3, "λ₂ = {}", ev[1]);
    }

    #[test]
    fn psd_projection_basics() {
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, 2.0]));
        assert_abs_diff_eq!(project_psd(&d), DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 2.0])), epsilon = 1e-14);
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let g = DMatrix::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
        let psd = &g * g.transpose();
        assert_abs_diff_eq!(project_psd(&psd), psd, epsilon = 1e-12);
        let s = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
        let s = (&s + s.transpose()) * 0.5;
        let once = project_psd(&s);
        assert_abs_diff_eq!(project_psd(&once), once, epsilon = 1e-12);
        assert!(min_eigenvalue(&once) > -1e-12);
    }

    #[test]
    fn psd_projection_is_nearest_among_cone_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        for _ in 0..50 {
            let s = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
            let s = (&s + s.transpose()) * 0.5;
            let best = (project_psd(&s) - &s).norm();
            for _ in 0..200 {
                let g = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
                let sample = &g * g.transpose();
                assert!((sample - &s).norm() >= best - 1e-12);
            }
        }
    }

    #[test]
    fn closed_form_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(58);
        for k in [1, 2, 3, 4, 8] {
            let theta: Vec<f64> = std::iter::once(1.0)
                .chain((0..k).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }))
                .collect();
            let a = assemble_a(k, &theta);
            let pm = assemble_p(k, &theta);
            let l = a.nrows();
            assert_abs_diff_eq!(&pm * &a, DMatrix::identity(l, l), epsilon = 1e-12);
        }
    }

    #[test]
    fn certifies_noiseless_ground_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let q = random_quat(&mut rng);
        let r = q.to_rotation_matrix();
        let k = 10;
        let a: Vec<Vec3> = (0..k).map(|_| rand_vec(&mut rng, 1.0)).collect();
        let mut b: Vec<Vec3> = a.iter().map(|x| r * x).collect();
        b[3] = Vec3::new(1.0, 1.0, -2.0);
        b[7] = Vec3::new(-2.0, 0.5, 0.3);
        let p = RotationProblem::new(a, b, vec![0.1; k], 1.0).unwrap();
        let mut theta = vec![1i8; k];
        theta[3] = -1;
        theta[7] = -1;
        let c = CandidateSolution::new(&p, q, theta.clone()).unwrap();
        let cert = certify(&p, &c, &CertifyOptions::default()).unwrap();
        assert!(cert.is_certified(), "{cert:?}");
        // Flipping a true inlier is caught without running the splitting.
        theta[0] = -1;
        let bad = CandidateSolution::new(&p, q, theta).unwrap();
        let cert = certify(&p, &bad, &CertifyOptions::default()).unwrap();
        assert_eq!(cert.verdict, Verdict::Suboptimal);
    }
}
