//! Exact scalar truncated least squares by adaptive voting, and the
//! consensus-maximization variant.
//!
//! Every measurement `s_k` is an inlier on the closed interval
//! `[s_k − c̄α_k, s_k + c̄α_k]`. Sorting the `2K` endpoints splits the line
//! into at most `2K − 1` open intervals with constant consensus sets; the
//! global minimizer is the weighted least-squares center of one of them.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, RegError, Result};

/// Relative tolerance for merging coincident interval endpoints.
pub const BOUNDARY_MERGE_TOL: f64 = 1e-12;
/// Relative slack on the inlier threshold test.
pub const THRESHOLD_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarTlsProblem {
    pub measurements: Vec<f64>,
    pub alphas: Vec<f64>,
    pub cbar_sq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarTlsSolution {
    pub estimate: f64,
    pub cost: f64,
    pub inlier_mask: Vec<bool>,
    /// Number of distinct consensus sets scored during the sweep.
    pub candidates_evaluated: usize,
}

impl ScalarTlsSolution {
    pub fn inlier_count(&self) -> usize {
        self.inlier_mask.iter().filter(|&&b| b).count()
    }
}

impl ScalarTlsProblem {
    pub fn new(measurements: Vec<f64>, alphas: Vec<f64>, cbar_sq: f64) -> Result<Self> {
        if measurements.is_empty() {
            return Err(RegError::TooFewMeasurements { needed: 1, got: 0 });
        }
        if alphas.len() != measurements.len() {
            return Err(invalid("measurements and alphas differ in length"));
        }
        if measurements.iter().any(|s| !s.is_finite()) {
            return Err(invalid("measurements must be finite"));
        }
        if alphas.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
            return Err(invalid("alphas must be positive and finite"));
        }
        if !(cbar_sq > 0.0) || !cbar_sq.is_finite() {
            return Err(invalid("cbar_sq must be positive"));
        }
        Ok(Self {
            measurements,
            alphas,
            cbar_sq,
        })
    }

    pub fn len(&self) -> usize {
        self.measurements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measurements.is_empty()
    }

    /// `Σ_k min((s − s_k)²/α_k², c̄²)`.
    pub fn objective(&self, s: f64) -> f64 {
        self.measurements
            .iter()
            .zip(&self.alphas)
            .map(|(m, a)| {
                let r = (s - m) / a;
                (r * r).min(self.cbar_sq)
            })
            .sum()
    }

    pub fn inlier_mask(&self, s: f64) -> Vec<bool> {
        let thr = self.cbar_sq * (1.0 + THRESHOLD_TOL);
        self.measurements
            .iter()
            .zip(&self.alphas)
            .map(|(m, a)| {
                let r = (s - m) / a;
                r * r <= thr
            })
            .collect()
    }

    /// Weighted least-squares center of a subset, `(Σ 1/α²)⁻¹ Σ s/α²`.
    pub fn weighted_center(&self, members: impl Iterator<Item = usize>) -> Option<f64> {
        let (mut w, mut ws) = (0.0, 0.0);
        for k in members {
            let wk = 1.0 / (self.alphas[k] * self.alphas[k]);
            w += wk;
            ws += wk * self.measurements[k];
        }
        (w > 0.0).then(|| ws / w)
    }

    fn solution_at(&self, estimate: f64, candidates: usize) -> ScalarTlsSolution {
        ScalarTlsSolution {
            estimate,
            cost: self.objective(estimate),
            inlier_mask: self.inlier_mask(estimate),
            candidates_evaluated: candidates,
        }
    }
}

/// Endpoint events grouped by (merged) abscissa.
struct Group {
    value: f64,
    enter: Vec<usize>,
    leave: Vec<usize>,
}

fn boundary_groups(p: &ScalarTlsProblem) -> Vec<Group> {
    let c = p.cbar_sq.sqrt();
    let mut events: Vec<(f64, bool, usize)> = Vec::with_capacity(2 * p.len());
    for (k, (s, a)) in p.measurements.iter().zip(&p.alphas).enumerate() {
        events.push((s - c * a, true, k));
        events.push((s + c * a, false, k));
    }
    events.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut groups: Vec<Group> = Vec::new();
    for (v, is_enter, k) in events {
        let merge = match groups.last() {
            Some(g) => v - g.value <= BOUNDARY_MERGE_TOL * v.abs().max(g.value.abs()),
            None => false,
        };
        if !merge {
            groups.push(Group {
                value: v,
                enter: Vec::new(),
                leave: Vec::new(),
            });
        }
        let g = groups.last_mut().expect("group pushed above");
        if is_enter {
            g.enter.push(k);
        } else {
            g.leave.push(k);
        }
    }
    groups
}

/// Running weighted sums over the active set, centered at `origin` to limit
/// cancellation in the residual sum of squares.
struct RunningSums {
    origin: f64,
    count: usize,
    w: f64,
    ws: f64,
    wss: f64,
}

impl RunningSums {
    fn update(&mut self, p: &ScalarTlsProblem, k: usize, sign: f64) {
        let wk = 1.0 / (p.alphas[k] * p.alphas[k]);
        let d = p.measurements[k] - self.origin;
        self.w += sign * wk;
        self.ws += sign * wk * d;
        self.wss += sign * wk * d * d;
        if sign > 0.0 {
            self.count += 1;
        } else {
            self.count -= 1;
        }
    }

    /// Weighted center and `Σ_I r²/α² + (K − |I|) c̄²` at that center.
    fn score(&self, p: &ScalarTlsProblem) -> (f64, f64) {
        let center = self.ws / self.w;
        let rss = (self.wss - self.ws * center).max(0.0);
        let outliers = (p.len() - self.count) as f64;
        (center + self.origin, rss + outliers * p.cbar_sq)
    }
}

struct Candidate {
    estimate: f64,
    score: f64,
    size: usize,
}

/// Global minimizer of the scalar TLS objective.
///
/// Scores each open interval's consensus set by its weighted center using
/// running sums, then re-evaluates the exact objective for every candidate
/// whose running-sum score is within round-off of the best one. Ties are
/// resolved by lower cost, then larger consensus set, then smaller estimate.
pub fn solve_tls(p: &ScalarTlsProblem) -> ScalarTlsSolution {
    let groups = boundary_groups(p);
    let origin = p.measurements.iter().sum::<f64>() / p.len() as f64;
    let mut sums = RunningSums {
        origin,
        count: 0,
        w: 0.0,
        ws: 0.0,
        wss: 0.0,
    };
    let mut cands: Vec<Candidate> = Vec::new();
    for g in groups.iter().take(groups.len().saturating_sub(1)) {
        for &k in &g.enter {
            sums.update(p, k, 1.0);
        }
        for &k in &g.leave {
            sums.update(p, k, -1.0);
        }
        if sums.count == 0 {
            continue;
        }
        let (estimate, score) = sums.score(p);
        cands.push(Candidate {
            estimate,
            score,
            size: sums.count,
        });
    }
    assert!(
        cands.len() < 2 * p.len(),
        "adaptive voting produced {} candidate sets for K = {}",
        cands.len(),
        p.len()
    );
    if cands.is_empty() {
        // All endpoints merged into one abscissa: every interval is a point.
        let est = p.weighted_center(0..p.len()).expect("K ≥ 1");
        return p.solution_at(est, 1);
    }

    // Running sums drift by a few ulps of the largest partial sum.
    let magnitude = p
        .measurements
        .iter()
        .zip(&p.alphas)
        .map(|(s, a)| (1.0 + (s - origin).powi(2)) / (a * a))
        .sum::<f64>()
        + p.len() as f64 * p.cbar_sq;
    let slack = 1e-9 * magnitude.max(1.0);
    let best_score = cands.iter().map(|c| c.score).fold(f64::INFINITY, f64::min);

    let mut best: Option<(f64, usize, f64)> = None;
    for c in cands.iter().filter(|c| c.score <= best_score + slack) {
        let cost = p.objective(c.estimate);
        let better = match best {
            None => true,
            Some((bc, bs, be)) => {
                let tol = 1e-12 * (1.0 + bc.abs());
                cost < bc - tol
                    || ((cost - bc).abs() <= tol && (c.size > bs || (c.size == bs && c.estimate < be)))
            }
        };
        if better {
            best = Some((cost, c.size, c.estimate));
        }
    }
    let (_, _, estimate) = best.expect("at least one candidate");
    p.solution_at(estimate, cands.len())
}

/// Consensus maximization: the estimate is a point with the largest number of
/// measurements within their thresholds.
///
/// Open intervals and the endpoints themselves are both scanned, since two
/// closed intervals that merely touch share only their endpoint. When an
/// interval attains the maximum its midpoint is returned (leftmost such
/// interval); the weighted center of the set is not used because it can fall
/// outside the common intersection.
pub fn solve_consensus_max(p: &ScalarTlsProblem) -> ScalarTlsSolution {
    let groups = boundary_groups(p);
    let mut count = 0usize;
    let mut best_interval: Option<(usize, f64)> = None;
    let mut best_point: Option<(usize, f64)> = None;
    let mut scored = 0usize;
    for (j, g) in groups.iter().enumerate() {
        let at_point = count + g.enter.len();
        if best_point.is_none_or(|(c, _)| at_point > c) {
            best_point = Some((at_point, g.value));
        }
        count = count + g.enter.len() - g.leave.len();
        if j + 1 < groups.len() && count > 0 {
            scored += 1;
            let mid = 0.5 * (g.value + groups[j + 1].value);
            if best_interval.is_none_or(|(c, _)| count > c) {
                best_interval = Some((count, mid));
            }
        }
    }
    let (pc, pv) = best_point.expect("K ≥ 1 gives at least one endpoint");
    let estimate = match best_interval {
        Some((ic, iv)) if ic >= pc => iv,
        _ => pv,
    };
    p.solution_at(estimate, scored)
}

/// Diagnostics for the sufficient condition under which the TLS and
/// consensus-maximization estimates select the same inlier set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McEquivalence {
    pub holds: bool,
    pub max_consensus: usize,
    pub second_largest: usize,
    /// `Σ (ŝ − s_k)²/α_k²` over the maximum consensus set at its weighted center.
    pub r_in: f64,
    pub mc_mask: Vec<bool>,
}

/// Checks `second < N_mc − r_in / c̄²`, where `second` is the size of the
/// largest consensus set (any point of the line) different from the maximum
/// one. Materializes every candidate set, so memory is `O(K²)`.
pub fn check_mc_equiv_condition(p: &ScalarTlsProblem) -> McEquivalence {
    let groups = boundary_groups(p);
    let k = p.len();
    let mut active = vec![false; k];
    let mut sets: Vec<Vec<bool>> = Vec::with_capacity(4 * k);
    for (j, g) in groups.iter().enumerate() {
        let mut closed = active.clone();
        for &e in &g.enter {
            closed[e] = true;
        }
        sets.push(closed);
        for &e in &g.enter {
            active[e] = true;
        }
        for &e in &g.leave {
            active[e] = false;
        }
        if j + 1 < groups.len() && active.iter().any(|&b| b) {
            sets.push(active.clone());
        }
    }
    let size = |s: &Vec<bool>| s.iter().filter(|&&b| b).count();
    let mc = solve_consensus_max(p);
    let mc_mask = mc.inlier_mask.clone();
    let n_mc = size(&mc_mask);
    let second = sets
        .iter()
        .filter(|s| **s != mc_mask)
        .map(size)
        .max()
        .unwrap_or(0);
    let center = p
        .weighted_center((0..k).filter(|&i| mc_mask[i]))
        .expect("maximum consensus set is nonempty");
    let r_in: f64 = (0..k)
        .filter(|&i| mc_mask[i])
        .map(|i| ((center - p.measurements[i]) / p.alphas[i]).powi(2))
        .sum();
    McEquivalence {
        holds: (second as f64) < n_mc as f64 - r_in / p.cbar_sq,
        max_consensus: n_mc,
        second_largest: second,
        r_in,
        mc_mask,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive oracle: best objective over weighted centers of all subsets,
    /// and the largest subset whose closed intervals share a point.
    fn oracle(p: &ScalarTlsProblem) -> (f64, usize) {
        let k = p.len();
        let c = p.cbar_sq.sqrt();
        let mut best_cost = f64::INFINITY;
        let mut best_card = 0;
        for mask in 1u32..(1 << k) {
            let members = (0..k).filter(|i| mask >> i & 1 == 1);
            let center = p.weighted_center(members.clone()).unwrap();
            best_cost = best_cost.min(p.objective(center));
            let lo = members.clone().map(|i| p.measurements[i] - c * p.alphas[i]).fold(f64::MIN, f64::max);
            let hi = members.clone().map(|i| p.measurements[i] + c * p.alphas[i]).fold(f64::MAX, f64::min);
            if lo <= hi {
                best_card = best_card.max(mask.count_ones() as usize);
            }
        }
        (best_cost, best_card)
    }

    fn random_problem(rng: &mut impl Rng, k: usize) -> ScalarTlsProblem {
        let truth = rng.random_range(-3.0..3.0);
        let s = (0..k)
            .map(|_| {
                if rng.random_bool(0.5) {
                    truth + rng.random_range(-0.3..0.3)
                } else {
                    rng.random_range(-10.0..10.0)
                }
            })
            .collect();
        let a = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
        ScalarTlsProblem::new(s, a, rng.random_range(0.3..2.0)).unwrap()
    }

    #[test]
    fn worked_example() {
        let p = ScalarTlsProblem::new(vec![0.0, 0.0, 3.0], vec![2.0; 3], 1.0).unwrap();
        let tls = solve_tls(&p);
        assert_abs_diff_eq!(tls.estimate, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(tls.cost, 1.0, epsilon = 1e-12);
        assert_eq!(tls.inlier_mask, vec![true, true, false]);
        let mc = solve_consensus_max(&p);
        assert_abs_diff_eq!(mc.estimate, 1.5, epsilon = 1e-12);
        assert_eq!(mc.inlier_mask, vec![true, true, true]);
        let chk = check_mc_equiv_condition(&p);
        assert!(!chk.holds);
        assert_eq!((chk.max_consensus, chk.second_largest), (3, 2));
        assert_abs_diff_eq!(chk.r_in, 1.5, epsilon = 1e-12);
    }

    #[test]
    fn single_and_identical_measurements() {
        let p = ScalarTlsProblem::new(vec![5.0], vec![0.7], 1.0).unwrap();
        let s = solve_tls(&p);
        assert_eq!((s.estimate, s.cost), (5.0, 0.0));
        let p = ScalarTlsProblem::new(vec![2.5; 6], vec![0.1, 0.2, 0.3, 0.1, 0.5, 0.9], 1.0).unwrap();
        let mc = solve_consensus_max(&p);
        assert!(mc.inlier_mask.iter().all(|&b| b));
        // All intervals contain 2.5; the innermost interval is centered there.
        assert_abs_diff_eq!(mc.estimate, 2.5, epsilon = 1e-12);
        assert_abs_diff_eq!(solve_tls(&p).estimate, 2.5, epsilon = 1e-12);
    }

    #[test]
    fn rejects_invalid_problems() {
        assert!(ScalarTlsProblem::new(vec![], vec![], 1.0).is_err());
        assert!(ScalarTlsProblem::new(vec![1.0], vec![0.0], 1.0).is_err());
        assert!(ScalarTlsProblem::new(vec![1.0], vec![1.0, 2.0], 1.0).is_err());
        assert!(ScalarTlsProblem::new(vec![1.0], vec![1.0], -1.0).is_err());
    }

    #[test]
    fn matches_subset_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let k = rng.random_range(1..=10);
            let p = random_problem(&mut rng, k);
            let (cost, card) = oracle(&p);
            let tls = solve_tls(&p);
            assert!((tls.cost - cost).abs() <= 1e-9, "tls {} oracle {}", tls.cost, cost);
            assert_abs_diff_eq!(tls.cost, p.objective(tls.estimate), epsilon = 1e-10);
            assert!(tls.candidates_evaluated < 2 * k);
            assert_eq!(solve_consensus_max(&p).inlier_count(), card);
        }
    }

    #[test]
    fn touching_intervals_count_as_consensus() {
        let p = ScalarTlsProblem::new(vec![0.0, 2.0], vec![1.0, 1.0], 1.0).unwrap();
        let mc = solve_consensus_max(&p);
        assert_eq!(mc.inlier_count(), 2);
        assert_abs_diff_eq!(mc.estimate, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn tight_cluster_with_far_outlier() {
        let p = ScalarTlsProblem::new(vec![1.0, 1.001, 0.999, 1.0005, 9.0], vec![0.1; 5], 1.0).unwrap();
        let chk = check_mc_equiv_condition(&p);
        assert!(chk.holds);
        assert_eq!(solve_tls(&p).inlier_mask, solve_consensus_max(&p).inlier_mask);
    }

    #[test]
    fn equivalence_condition_implies_equal_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut hits = 0;
        for _ in 0..400 {
            let k = rng.random_range(3..=12);
            let p = random_problem(&mut rng, k);
            if check_mc_equiv_condition(&p).holds {
                hits += 1;
                assert_eq!(solve_tls(&p).inlier_mask, solve_consensus_max(&p).inlier_mask);
            }
        }
        assert!(hits > 20);
    }
}
