//! The decoupled registration cascade: scale voting on length ratios,
//! scale-consistency pruning, maximum clique selection, robust rotation on
//! the clique's difference vectors, optional certification, and per-axis
//! translation voting. Also a-posteriori error bounds for a finished run.

use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Matrix3xX};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::certifier::{certify, CandidateSolution, Certificate, CertifyOptions};
use crate::clique::{prune_by_scale, CliqueSolver, PrunedGraph, DEFAULT_CLIQUE_BUDGET};
use crate::error::{invalid, RegError, Result};
use crate::geometry::{CorrespondenceSet, RigidTransform, TlsConfig, Vec3};
use crate::invariants::{GraphTopology, MeasurementGraph, DEGENERATE_REL_TOL};
use crate::rotation::{solve_gnc_tls, GncOptions, RotationProblem, RotationSolution};
use crate::scalar_tls::{solve_tls, ScalarTlsProblem};

/// Certification is skipped above this many rotation measurements; the dense
/// iterates grow as `16K²`.
pub const DEFAULT_CERTIFY_MAX_K: usize = 300;
/// Tuples `(i; j, h, k)` examined for the coarse rotation bound.
pub const MAX_ROTATION_TUPLES: usize = 500;
/// Triplets enumerated for the worst-case tighter bounds.
pub const MAX_TIGHT_SUBSETS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    Complete,
    Chain,
    Custom(Vec<(usize, usize)>),
}

impl Topology {
    fn build(&self, n: usize) -> Result<GraphTopology> {
        Ok(match self {
            Topology::Complete => GraphTopology::complete(n),
            Topology::Chain => GraphTopology::chain(n),
            Topology::Custom(e) => GraphTopology::custom(n, e)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisterOptions {
    /// Skip scale voting and use this value.
    pub known_scale: Option<f64>,
    pub topology: Topology,
    pub certify: bool,
    pub clique_budget: Duration,
    pub gnc: GncOptions,
    pub certify_options: CertifyOptions,
    pub certify_max_k: usize,
}

impl Default for RegisterOptions {
    fn default() -> Self {
        Self {
            known_scale: None,
            topology: Topology::Complete,
            certify: false,
            clique_budget: DEFAULT_CLIQUE_BUDGET,
            gnc: GncOptions::default(),
            certify_options: CertifyOptions::default(),
            certify_max_k: DEFAULT_CERTIFY_MAX_K,
        }
    }
}

/// Wall-clock seconds per stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub invariants: f64,
    pub scale: f64,
    pub pruning: f64,
    pub clique: f64,
    pub rotation: f64,
    pub certification: f64,
    pub translation: f64,
}

impl StageTimings {
    pub fn total(&self) -> f64 {
        self.invariants + self.scale + self.pruning + self.clique + self.rotation + self.certification + self.translation
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub n_correspondences: usize,
    pub n_edges: usize,
    pub n_degenerate_edges: usize,
    pub scale_inliers: usize,
    pub edges_kept: usize,
    pub clique_size: usize,
    /// False when the clique search ran out of time.
    pub clique_exact: bool,
    pub rotation_measurements: usize,
    pub rotation_inliers: usize,
    pub gnc_iterations: usize,
    pub rotation_degenerate: bool,
    pub certification_skipped: bool,
    pub retried_next_clique: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    pub transform: RigidTransform,
    /// Clique vertices that pass all three translation votes, ascending.
    pub inlier_indices: Vec<usize>,
    pub clique: Vec<usize>,
    pub certificate: Option<Certificate>,
    pub stage_timings: StageTimings,
    pub stage_stats: StageStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslationEstimate {
    pub translation: Vec3,
    pub axis_masks: [Vec<bool>; 3],
    /// Intersection of the per-axis masks.
    pub mask: Vec<bool>,
}

/// Solves each axis of `b_i − ŝR̂a_i` by scalar TLS with bound `β_i`.
pub fn estimate_translation(
    source: &[Vec3],
    target: &[Vec3],
    s_hat: f64,
    r_hat: &Matrix3<f64>,
    betas: &[f64],
    cbar_sq: f64,
) -> Result<TranslationEstimate> {
    if source.len() != target.len() || source.len() != betas.len() {
        return Err(invalid("translation inputs differ in length"));
    }
    let residuals: Vec<Vec3> = source.iter().zip(target).map(|(a, b)| b - r_hat * a * s_hat).collect();
    let mut t = Vec3::zeros();
    let mut masks: [Vec<bool>; 3] = Default::default();
    for l in 0..3 {
        let p = ScalarTlsProblem::new(residuals.iter().map(|r| r[l]).collect(), betas.to_vec(), cbar_sq)?;
        let sol = solve_tls(&p);
        t[l] = sol.estimate;
        masks[l] = sol.inlier_mask;
    }
    let mask = (0..source.len()).map(|i| masks[0][i] && masks[1][i] && masks[2][i]).collect();
    Ok(TranslationEstimate {
        translation: t,
        axis_masks: masks,
        mask,
    })
}

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

fn all_pairs(vs: &[usize]) -> Vec<(usize, usize)> {
    vs.iter()
        .enumerate()
        .flat_map(|(x, &i)| vs[x + 1..].iter().map(move |&j| (i, j)))
        .collect()
}

/// Largest connected component of the pruned graph, sorted; ties go to the
/// component with the smallest vertex. Returns the component and its edges.
fn largest_component(g: &PrunedGraph) -> (Vec<usize>, Vec<(usize, usize)>) {
    let n = g.n_vertices();
    let mut nbrs = vec![Vec::new(); n];
    for &(i, j) in &g.kept_edges {
        nbrs[i].push(j);
        nbrs[j].push(i);
    }
    let mut label = vec![usize::MAX; n];
    let mut best: Vec<usize> = Vec::new();
    for root in 0..n {
        if label[root] != usize::MAX {
            continue;
        }
        label[root] = root;
        let mut comp = vec![root];
        let mut head = 0;
        while head < comp.len() {
            let v = comp[head];
            head += 1;
            for &u in &nbrs[v] {
                if label[u] == usize::MAX {
                    label[u] = root;
                    comp.push(u);
                }
            }
        }
        if comp.len() > best.len() {
            best = comp;
        }
    }
    best.sort_unstable();
    let root = best.first().map_or(usize::MAX, |&v| label[v]);
    let edges = g.kept_edges.iter().copied().filter(|&(i, _)| label[i] == root).collect();
    (best, edges)
}

/// Rotation measurements on the given edges.
fn edge_rotation_problem(c: &CorrespondenceSet, edges: &[(usize, usize)], s_hat: f64, cbar_sq: f64) -> Result<RotationProblem> {
    let m = edges.len();
    let (mut a, mut b, mut beta) = (Vec::with_capacity(m), Vec::with_capacity(m), Vec::with_capacity(m));
    for &(i, j) in edges {
        a.push((c.source[j] - c.source[i]) * s_hat);
        b.push(c.target[j] - c.target[i]);
        beta.push(c.noise_bounds[i] + c.noise_bounds[j]);
    }
    RotationProblem::new(a, b, beta, cbar_sq)
}

struct RotationStage {
    clique: Vec<usize>,
    solution: RotationSolution,
    certificate: Option<Certificate>,
    n_measurements: usize,
}

fn rotation_stage(
    c: &CorrespondenceSet,
    clique: Vec<usize>,
    edges: &[(usize, usize)],
    s_hat: f64,
    cfg: &TlsConfig,
    opts: &RegisterOptions,
    timings: &mut StageTimings,
    skipped: &mut bool,
) -> Result<RotationStage> {
    let t0 = Instant::now();
    let problem = edge_rotation_problem(c, edges, s_hat, cfg.cbar_sq)?;
    let solution = solve_gnc_tls(&problem, &opts.gnc)?;
    timings.rotation += secs(t0);

    let mut certificate = None;
    if opts.certify {
        if problem.len() <= opts.certify_max_k {
            let t0 = Instant::now();
            let cand = CandidateSolution::new(&problem, solution.rotation, solution.theta.clone())?;
            certificate = Some(certify(&problem, &cand, &opts.certify_options)?);
            timings.certification += secs(t0);
        } else {
            *skipped = true;
        }
    }
    Ok(RotationStage {
        clique,
        n_measurements: problem.len(),
        solution,
        certificate,
    })
}

/// Runs the full cascade.
pub fn register(c: &CorrespondenceSet, cfg: &TlsConfig, opts: &RegisterOptions) -> Result<RegistrationResult> {
    cfg.validate()?;
    let n = c.len();
    if n < 3 {
        return Err(RegError::TooFewMeasurements { needed: 3, got: n });
    }
    if let Some(s) = opts.known_scale {
        if !(s > 0.0) || !s.is_finite() {
            return Err(invalid(format!("known scale must be positive, got {s}")));
        }
    }
    let mut timings = StageTimings::default();
    let mut stats = StageStats {
        n_correspondences: n,
        ..Default::default()
    };

    let t0 = Instant::now();
    let graph = MeasurementGraph::build(c, opts.topology.build(n)?)?;
    stats.n_edges = graph.tims.len();
    stats.n_degenerate_edges = graph.degenerate_edges.len();
    timings.invariants = secs(t0);

    let t0 = Instant::now();
    let s_hat = match opts.known_scale {
        Some(s) => s,
        None => {
            let (s, a): (Vec<f64>, Vec<f64>) = graph.valid_trims().map(|t| (t.s_meas, t.alpha)).unzip();
            if s.is_empty() {
                return Err(RegError::InsufficientInliers { found: 0 });
            }
            let sol = solve_tls(&ScalarTlsProblem::new(s, a, cfg.cbar_sq)?);
            stats.scale_inliers = sol.inlier_count();
            sol.estimate
        }
    };
    if !(s_hat > 0.0) {
        return Err(RegError::InsufficientInliers { found: 0 });
    }
    timings.scale = secs(t0);

    let t0 = Instant::now();
    let pruned = prune_by_scale(&graph, s_hat, cfg.cbar_sq);
    stats.edges_kept = pruned.n_edges();
    drop(graph);
    timings.pruning = secs(t0);

    // Cliques only make sense on the complete graph; sparse topologies keep
    // the largest connected component and its surviving edges instead.
    let t0 = Instant::now();
    let mut solver = (opts.topology == Topology::Complete).then(|| CliqueSolver::new(&pruned, opts.clique_budget));
    let (first, first_edges) = if let Some(solver) = solver.as_mut() {
        let k = solver.max_clique();
        stats.clique_exact = k.is_certified_maximum;
        let e = all_pairs(&k.vertices);
        (k.vertices, e)
    } else {
        largest_component(&pruned)
    };
    timings.clique = secs(t0);
    if first.len() < 3 {
        return Err(RegError::InsufficientInliers { found: first.len() });
    }

    let mut skipped = false;
    let mut stage = rotation_stage(c, first, &first_edges, s_hat, cfg, opts, &mut timings, &mut skipped)?;
    let uncertified = stage.certificate.as_ref().is_some_and(|cert| !cert.is_certified());
    if let Some(solver) = solver.as_mut().filter(|_| uncertified) {
        let t0 = Instant::now();
        let next = solver.next_clique();
        timings.clique += secs(t0);
        if let Some(next) = next.filter(|k| k.vertices.len() >= 3) {
            stats.retried_next_clique = true;
            let edges = all_pairs(&next.vertices);
            let retry = rotation_stage(c, next.vertices, &edges, s_hat, cfg, opts, &mut timings, &mut skipped)?;
            if retry.certificate.as_ref().is_some_and(Certificate::is_certified) {
                stage = retry;
            }
        }
    }
    stats.certification_skipped = skipped;
    stats.clique_size = stage.clique.len();
    stats.rotation_measurements = stage.n_measurements;
    stats.rotation_inliers = stage.solution.theta.iter().filter(|&&t| t > 0).count();
    stats.gnc_iterations = stage.solution.gnc_iterations;
    stats.rotation_degenerate = stage.solution.degenerate;

    let t0 = Instant::now();
    let r_hat = stage.solution.rotation.to_rotation_matrix();
    let pick = |v: &[Vec3]| stage.clique.iter().map(|&i| v[i]).collect::<Vec<_>>();
    let betas: Vec<f64> = stage.clique.iter().map(|&i| c.noise_bounds[i]).collect();
    let te = estimate_translation(&pick(&c.source), &pick(&c.target), s_hat, &r_hat, &betas, cfg.cbar_sq)?;
    timings.translation = secs(t0);

    let inlier_indices = stage
        .clique
        .iter()
        .zip(&te.mask)
        .filter_map(|(&i, &m)| m.then_some(i))
        .collect();
    Ok(RegistrationResult {
        transform: RigidTransform::new(s_hat, stage.solution.rotation, te.translation)?,
        inlier_indices,
        clique: stage.clique,
        certificate: stage.certificate,
        stage_timings: timings,
        stage_stats: stats,
    })
}

/// Bounds from enumerating (or, past the cap, pooling) inlier triplets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TighterBounds {
    pub scale: f64,
    /// Bound on the geodesic rotation error in radians.
    pub rotation_angle: f64,
    pub translation: [f64; 3],
    /// Set when the triplet cap was exceeded and the whole selected set was
    /// treated as the inlier set.
    pub not_worst_case: bool,
    pub subsets_evaluated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBounds {
    /// Bound on `|ŝ − s°|`.
    pub eta_s: f64,
    /// Bound on `‖ŝR̂ − s°R°‖_F`; infinite for coplanar inliers.
    pub eta_r_frobenius: f64,
    /// Bound on `‖t̂ − t°‖`.
    pub eta_t: f64,
    pub rotation_diagnosis: Option<String>,
    pub rotation_tuples_evaluated: usize,
    pub rotation_tuples_sampled: bool,
    pub tighter_bounds: Option<TighterBounds>,
}

struct PairData {
    alpha: f64,
    s_meas: f64,
    /// `‖b̄ − ŝR̂ā‖ / ‖ā‖`
    rot_residual: f64,
    u: Vec3,
}

/// Error bounds over the final inliers of `result`, assuming they contain
/// the true inliers with noise bounded by `noise_bounds`.
pub fn compute_bounds(result: &RegistrationResult, c: &CorrespondenceSet, cfg: &TlsConfig) -> Result<ErrorBounds> {
    let inl = &result.inlier_indices;
    let m = inl.len();
    if m < 3 {
        return Err(RegError::InsufficientInliers { found: m });
    }
    let cbar = cfg.cbar();
    let s_hat = result.transform.scale;
    let r_hat = result.transform.rotation_matrix();
    let eps = DEGENERATE_REL_TOL * crate::invariants::cloud_diameter(&c.source);

    // Pair data indexed by positions (x, y), x < y, within `inl`.
    let mut pairs: Vec<Option<PairData>> = Vec::with_capacity(m * (m - 1) / 2);
    for x in 0..m {
        for y in x + 1..m {
            let (i, j) = (inl[x], inl[y]);
            let a = c.source[j] - c.source[i];
            let b = c.target[j] - c.target[i];
            let na = a.norm();
            pairs.push((na > eps).then(|| PairData {
                alpha: (c.noise_bounds[i] + c.noise_bounds[j]) / na,
                s_meas: b.norm() / na,
                rot_residual: (b - r_hat * a * s_hat).norm() / na,
                u: a / na,
            }));
        }
    }
    let pidx = |x: usize, y: usize| -> usize {
        let (x, y) = (x.min(y), x.max(y));
        x * (2 * m - x - 1) / 2 + (y - x - 1)
    };
    let max_alpha = pairs.iter().flatten().map(|p| p.alpha).fold(0.0, f64::max);
    let max_beta = inl.iter().map(|&i| c.noise_bounds[i]).fold(0.0, f64::max);

    // Coarse scale: inlier ratios lie within α of s° and within c̄α of ŝ.
    let eta_s = (1.0 + cbar) * max_alpha;
    // Coarse translation, generalized to c̄.
    let eta_t = (6.0 + 3.0 * cbar + 3.0 * 3f64.sqrt() * cbar) * max_beta;

    // Coarse rotation over tuples (anchor; three others).
    let n_tuples = m * (m - 1) * (m - 2) * (m - 3) / 6;
    let sampled = n_tuples > MAX_ROTATION_TUPLES;
    let mut min_sigma = f64::INFINITY;
    let mut evaluated = 0;
    let mut eval_tuple = |anchor: usize, others: [usize; 3]| {
        let cols: Option<Vec<Vec3>> = others.iter().map(|&o| pairs[pidx(anchor, o)].as_ref().map(|p| p.u)).collect();
        let sigma = match cols {
            Some(cols) => Matrix3::from_columns(&cols).singular_values().min(),
            None => 0.0,
        };
        min_sigma = min_sigma.min(sigma);
        evaluated += 1;
    };
    if m >= 4 {
        if sampled {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            for _ in 0..MAX_ROTATION_TUPLES {
                let idx = sample(&mut rng, m, 4);
                eval_tuple(idx.index(0), [idx.index(1), idx.index(2), idx.index(3)]);
            }
        } else {
            for anchor in 0..m {
                let rest: Vec<usize> = (0..m).filter(|&v| v != anchor).collect();
                for p in 0..rest.len() {
                    for q in p + 1..rest.len() {
                        for r in q + 1..rest.len() {
                            eval_tuple(anchor, [rest[p], rest[q], rest[r]]);
                        }
                    }
                }
            }
        }
    }
    let (eta_r, diagnosis) = if m < 4 {
        (f64::INFINITY, Some("fewer than 4 inliers".to_string()))
    } else if min_sigma <= 1e-9 {
        (f64::INFINITY, Some("inlier geometry is coplanar or collinear".to_string()))
    } else {
        (3f64.sqrt() * (1.0 + cbar) * max_alpha / min_sigma, None)
    };

    let tighter = tighter_bounds(c, result, &pairs, &pidx, s_hat);
    Ok(ErrorBounds {
        eta_s,
        eta_r_frobenius: eta_r,
        eta_t,
        rotation_diagnosis: diagnosis,
        rotation_tuples_evaluated: evaluated,
        rotation_tuples_sampled: sampled,
        tighter_bounds: tighter,
    })
}

/// Per-subset rotation term `Σζ² / (2ŝ(σ₁² + σ₂²))`, which bounds
/// `s°(1 − cos θ)` when the subset holds only true inliers.
fn rotation_term(ps: &[&PairData], s_hat: f64) -> Option<f64> {
    let zeta_sq: f64 = ps.iter().map(|p| (p.rot_residual + p.alpha).powi(2)).sum();
    let a = Matrix3xX::from_columns(&ps.iter().map(|p| p.u).collect::<Vec<_>>());
    let mut sv: Vec<f64> = a.singular_values().iter().copied().collect();
    sv.resize(3, 0.0);
    sv.sort_by(f64::total_cmp);
    let denom = 2.0 * s_hat * (sv[0] * sv[0] + sv[1] * sv[1]);
    (denom > 1e-18).then(|| zeta_sq / denom)
}

fn tighter_bounds(
    c: &CorrespondenceSet,
    result: &RegistrationResult,
    pairs: &[Option<PairData>],
    pidx: &dyn Fn(usize, usize) -> usize,
    s_hat: f64,
) -> Option<TighterBounds> {
    let inl = &result.inlier_indices;
    let m = inl.len();
    let t = &result.transform;
    let r_hat = t.rotation_matrix();
    let n_subsets = m * (m - 1) * (m - 2) / 6;
    let worst_case = n_subsets <= MAX_TIGHT_SUBSETS;

    let zeta_s = |p: &PairData| (p.s_meas - s_hat).abs() + p.alpha;
    // Per point: ‖a_i‖ and ζ^t per axis.
    let pt: Vec<(f64, Vec3)> = inl
        .iter()
        .map(|&i| {
            let r = c.target[i] - r_hat * c.source[i] * s_hat - t.translation;
            (c.source[i].norm(), r.abs().add_scalar(c.noise_bounds[i]))
        })
        .collect();

    let (e_s, y) = if worst_case {
        let mut e_s = 0.0f64;
        let mut y = 0.0f64;
        for x in 0..m {
            for yy in x + 1..m {
                for z in yy + 1..m {
                    let tri = [pidx(x, yy), pidx(x, z), pidx(yy, z)];
                    let ps: Option<Vec<&PairData>> = tri.iter().map(|&k| pairs[k].as_ref()).collect();
                    let ps = ps?;
                    e_s = e_s.max(ps.iter().map(|p| zeta_s(p)).fold(f64::INFINITY, f64::min));
                    y = y.max(rotation_term(&ps, s_hat)?);
                }
            }
        }
        (e_s, y)
    } else {
        let ps: Vec<&PairData> = pairs.iter().flatten().collect();
        let e_s = ps.iter().map(|p| zeta_s(p)).fold(f64::INFINITY, f64::min);
        (e_s, rotation_term(&ps, s_hat)?)
    };

    let s_lower = s_hat - e_s;
    let one_minus_cos = if s_lower > 0.0 { (y / s_lower).min(2.0) } else { 2.0 };
    let rotation_angle = (1.0 - one_minus_cos).clamp(-1.0, 1.0).acos();
    // Largest squared singular value of ŝR̂ − s°R° is (ŝ−s°)² + 2ŝs°(1−cos θ).
    let sigma_max = (e_s * e_s + 2.0 * s_hat * y).sqrt();
    let mut translation = [0.0; 3];
    for (l, out) in translation.iter_mut().enumerate() {
        let mut f: Vec<f64> = pt.iter().map(|(na, z)| sigma_max * na + z[l]).collect();
        f.sort_by(|a, b| b.total_cmp(a));
        // Worst min over any three inliers is the third largest value;
        // without enumeration, the whole set is taken as the inlier set.
        *out = if worst_case { f[2] } else { f[m - 1] };
    }
    Some(TighterBounds {
        scale: e_s,
        rotation_angle,
        translation,
        not_worst_case: !worst_case,
        subsets_evaluated: if worst_case { n_subsets } else { 1 },
    })
}
