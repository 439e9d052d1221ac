//! Scale-consistency pruning and exact maximum clique search.
//!
//! The search runs in two passes. The first is a bitset branch and bound with
//! a greedy-coloring bound over a degeneracy ordering, which finds the clique
//! number ω. The second walks candidate cliques in lexicographic order of
//! their sorted vertex lists and stops at the first one of size ω, so ties
//! resolve to the lexicographically smallest maximum clique.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::invariants::MeasurementGraph;

/// Default wall-clock budget for one clique search.
pub const DEFAULT_CLIQUE_BUDGET: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, PartialEq, Eq)]
struct Bitset {
    words: Vec<u64>,
}

impl Bitset {
    fn new(n: usize) -> Self {
        Self {
            words: vec![0; n.div_ceil(64)],
        }
    }

    fn set(&mut self, i: usize) {
        self.words[i / 64] |= 1 << (i % 64);
    }

    fn clear(&mut self, i: usize) {
        self.words[i / 64] &= !(1 << (i % 64));
    }

    #[cfg(test)]
    fn get(&self, i: usize) -> bool {
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    fn and(&self, row: &[u64]) -> Self {
        Self {
            words: self.words.iter().zip(row).map(|(a, b)| a & b).collect(),
        }
    }

    fn and_not_assign(&mut self, row: &[u64]) {
        for (a, b) in self.words.iter_mut().zip(row) {
            *a &= !b;
        }
    }

    /// Keeps only indices strictly greater than `i`.
    fn retain_above(&mut self, i: usize) {
        let w = i / 64;
        for x in &mut self.words[..w] {
            *x = 0;
        }
        let bit = i % 64;
        self.words[w] &= if bit == 63 { 0 } else { !0u64 << (bit + 1) };
    }

    fn first(&self) -> Option<usize> {
        self.words
            .iter()
            .enumerate()
            .find(|(_, &w)| w != 0)
            .map(|(k, w)| k * 64 + w.trailing_zeros() as usize)
    }

    fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(k, &w)| {
            let mut w = w;
            std::iter::from_fn(move || {
                if w == 0 {
                    return None;
                }
                let t = w.trailing_zeros() as usize;
                w &= w - 1;
                Some(k * 64 + t)
            })
        })
    }
}

/// Undirected graph with packed adjacency rows.
#[derive(Debug, Clone)]
pub struct PrunedGraph {
    n: usize,
    words: usize,
    adj: Vec<u64>,
    pub kept_edges: Vec<(usize, usize)>,
}

impl PrunedGraph {
    /// Self loops are ignored and duplicate edges collapse.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let words = n.div_ceil(64).max(1);
        let mut g = Self {
            n,
            words,
            adj: vec![0; n * words],
            kept_edges: Vec::with_capacity(edges.len()),
        };
        for &(a, b) in edges {
            assert!(a < n && b < n, "edge ({a}, {b}) out of range");
            if a == b || g.is_adjacent(a, b) {
                continue;
            }
            g.adj[a * words + b / 64] |= 1 << (b % 64);
            g.adj[b * words + a / 64] |= 1 << (a % 64);
            g.kept_edges.push((a.min(b), a.max(b)));
        }
        g
    }

    pub fn n_vertices(&self) -> usize {
        self.n
    }

    pub fn n_edges(&self) -> usize {
        self.kept_edges.len()
    }

    pub fn is_adjacent(&self, a: usize, b: usize) -> bool {
        self.adj[a * self.words + b / 64] >> (b % 64) & 1 == 1
    }

    fn row(&self, v: usize) -> &[u64] {
        &self.adj[v * self.words..(v + 1) * self.words]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.row(v).iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_clique(&self, vs: &[usize]) -> bool {
        vs.iter()
            .enumerate()
            .all(|(k, &a)| vs[k + 1..].iter().all(|&b| a != b && self.is_adjacent(a, b)))
    }

    /// Core number of every vertex (Matula–Beck bucket peeling) and the
    /// removal order.
    fn degeneracy(&self) -> (Vec<usize>, Vec<usize>) {
        let n = self.n;
        let mut deg: Vec<usize> = (0..n).map(|v| self.degree(v)).collect();
        let maxd = deg.iter().copied().max().unwrap_or(0);
        let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); maxd + 1];
        for v in 0..n {
            buckets[deg[v]].push(v);
        }
        let mut removed = vec![false; n];
        let mut core = vec![0; n];
        let mut order = Vec::with_capacity(n);
        let mut k = 0;
        let mut d = 0;
        while order.len() < n {
            // Buckets hold stale entries; skip them lazily.
            while d <= maxd && buckets[d].is_empty() {
                d += 1;
            }
            let v = buckets[d].pop().expect("nonempty bucket");
            if removed[v] || deg[v] != d {
                continue;
            }
            k = k.max(d);
            core[v] = k;
            removed[v] = true;
            order.push(v);
            for u in (Bitset { words: self.row(v).to_vec() }).iter() {
                if !removed[u] {
                    deg[u] -= 1;
                    buckets[deg[u]].push(u);
                    d = d.min(deg[u]);
                }
            }
        }
        (core, order)
    }
}

/// Keeps the edges whose ratio measurement agrees with `s_hat`:
/// `|s_ij − ŝ| ≤ c̄ α_ij`. Degenerate edges are dropped.
pub fn prune_by_scale(g: &MeasurementGraph, s_hat: f64, cbar_sq: f64) -> PrunedGraph {
    let cbar = cbar_sq.sqrt();
    let edges: Vec<(usize, usize)> = g
        .valid_trims()
        .filter(|t| (t.s_meas - s_hat).abs() <= cbar * t.alpha)
        .map(|t| (t.i, t.j))
        .collect();
    PrunedGraph::from_edges(g.n_vertices, &edges)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CliqueResult {
    /// Sorted vertex indices.
    pub vertices: Vec<usize>,
    /// False when the time budget expired before the search completed.
    pub is_certified_maximum: bool,
}

impl CliqueResult {
    fn new(g: &PrunedGraph, mut vertices: Vec<usize>, exact: bool) -> Self {
        vertices.sort_unstable();
        assert!(g.is_clique(&vertices), "clique search returned a non-clique");
        Self {
            vertices,
            is_certified_maximum: exact,
        }
    }
}

struct Deadline {
    end: Instant,
    ticks: u32,
    expired: bool,
}

impl Deadline {
    fn new(budget: Duration) -> Self {
        Self {
            end: Instant::now() + budget,
            ticks: 0,
            expired: false,
        }
    }

    fn check(&mut self) -> bool {
        self.ticks = self.ticks.wrapping_add(1);
        if !self.expired && self.ticks % 256 == 0 && Instant::now() >= self.end {
            self.expired = true;
        }
        self.expired
    }
}

/// Branch-and-bound state over a relabeled copy of the graph whose labels
/// follow decreasing core order.
struct Relabeled {
    words: usize,
    adj: Vec<u64>,
    to_orig: Vec<usize>,
}

impl Relabeled {
    fn row(&self, v: usize) -> &[u64] {
        &self.adj[v * self.words..(v + 1) * self.words]
    }

    /// Greedy sequential coloring; returns vertices grouped by color and the
    /// color (1-based) of each, non-decreasing.
    fn color_sort(&self, cands: &Bitset) -> (Vec<usize>, Vec<usize>) {
        let mut uncolored = cands.clone();
        let mut order = Vec::with_capacity(cands.count());
        let mut colors = Vec::with_capacity(order.capacity());
        let mut color = 0;
        while !uncolored.is_empty() {
            color += 1;
            let mut q = uncolored.clone();
            while let Some(v) = q.first() {
                q.clear(v);
                q.and_not_assign(self.row(v));
                uncolored.clear(v);
                order.push(v);
                colors.push(color);
            }
        }
        (order, colors)
    }

    fn expand(&self, cands: Bitset, clique: &mut Vec<usize>, best: &mut Vec<usize>, dl: &mut Deadline) {
        let (order, colors) = self.color_sort(&cands);
        let mut local = cands;
        for idx in (0..order.len()).rev() {
            if clique.len() + colors[idx] <= best.len() || dl.check() {
                return;
            }
            let v = order[idx];
            let next = local.and(self.row(v));
            clique.push(v);
            if next.is_empty() {
                if clique.len() > best.len() {
                    best.clone_from(clique);
                }
            } else {
                self.expand(next, clique, best, dl);
            }
            clique.pop();
            local.clear(v);
        }
    }
}

/// Exact maximum clique solver with deterministic tie resolution and an
/// iterator over progressively worse maximal cliques.
pub struct CliqueSolver<'a> {
    g: &'a PrunedGraph,
    core: Vec<usize>,
    omega: usize,
    omega_exact: bool,
    returned: Vec<Vec<usize>>,
    budget: Duration,
}

impl<'a> CliqueSolver<'a> {
    pub fn new(g: &'a PrunedGraph, budget: Duration) -> Self {
        let (core, order) = g.degeneracy();
        let mut s = Self {
            g,
            core,
            omega: 0,
            omega_exact: true,
            returned: Vec::new(),
            budget,
        };
        if g.n > 0 {
            let (omega, exact) = s.clique_number(&order);
            s.omega = omega;
            s.omega_exact = exact;
        }
        s
    }

    pub fn clique_number(&mut self, removal_order: &[usize]) -> (usize, bool) {
        let g = self.g;
        let n = g.n;
        // Highest-core vertices get the smallest labels.
        let to_orig: Vec<usize> = removal_order.iter().rev().copied().collect();
        let mut to_new = vec![0; n];
        for (k, &v) in to_orig.iter().enumerate() {
            to_new[v] = k;
        }
        let words = n.div_ceil(64).max(1);
        let mut adj = vec![0u64; n * words];
        for &(a, b) in &g.kept_edges {
            let (x, y) = (to_new[a], to_new[b]);
            adj[x * words + y / 64] |= 1 << (y % 64);
            adj[y * words + x / 64] |= 1 << (x % 64);
        }
        let rl = Relabeled { words, adj, to_orig };

        let mut best = greedy_clique(&rl, n);
        let mut all = Bitset::new(n);
        for v in 0..n {
            // A vertex of core number c lies in no clique larger than c + 1.
            if self.core[rl.to_orig[v]] + 1 > best.len() {
                all.set(v);
            }
        }
        let mut dl = Deadline::new(self.budget);
        let mut clique = Vec::new();
        rl.expand(all, &mut clique, &mut best, &mut dl);
        (best.len(), !dl.expired)
    }

    /// Clique number found by the branch and bound.
    pub fn omega(&self) -> usize {
        self.omega
    }

    /// Lexicographically smallest maximum clique.
    pub fn max_clique(&mut self) -> CliqueResult {
        self.returned.clear();
        self.next_clique().unwrap_or(CliqueResult {
            vertices: Vec::new(),
            is_certified_maximum: self.omega_exact,
        })
    }

    /// Next maximal clique in the order (size descending, then
    /// lexicographic), skipping cliques equal to or contained in any clique
    /// already returned. Sizes below 3 are not searched.
    pub fn next_clique(&mut self) -> Option<CliqueResult> {
        if self.omega == 0 {
            return None;
        }
        let floor = if self.returned.is_empty() { 1 } else { 3.min(self.omega) };
        let mut dl = Deadline::new(self.budget);
        for target in (floor..=self.omega).rev() {
            let mut roots = Bitset::new(self.g.n);
            for v in 0..self.g.n {
                if self.core[v] + 1 >= target {
                    roots.set(v);
                }
            }
            let mut clique = Vec::with_capacity(target);
            let returned = &self.returned;
            let accept = |c: &[usize]| !returned.iter().any(|r| c.iter().all(|v| r.binary_search(v).is_ok()));
            if let Some(found) = lex_search(self.g, roots, &mut clique, target, &accept, &mut dl) {
                self.returned.push(found.clone());
                let exact = self.omega_exact && !dl.expired;
                return Some(CliqueResult::new(self.g, found, exact));
            }
            if dl.expired {
                break;
            }
        }
        None
    }
}

fn greedy_clique(rl: &Relabeled, n: usize) -> Vec<usize> {
    let mut best = Vec::new();
    for seed in 0..n.min(16) {
        let mut clique = vec![seed];
        let mut cands = Bitset { words: rl.row(seed).to_vec() };
        while let Some(v) = cands.first() {
            clique.push(v);
            cands = cands.and(rl.row(v));
        }
        if clique.len() > best.len() {
            best = clique;
        }
    }
    best
}

/// Greedy coloring count of `cands` in label order; an upper bound on the
/// size of any clique inside `cands`.
fn color_bound(g: &PrunedGraph, cands: &Bitset, cap: usize) -> usize {
    let mut uncolored = cands.clone();
    let mut colors = 0;
    while !uncolored.is_empty() && colors < cap {
        colors += 1;
        let mut q = uncolored.clone();
        while let Some(v) = q.first() {
            q.clear(v);
            q.and_not_assign(g.row(v));
            uncolored.clear(v);
        }
    }
    colors
}

/// Depth-first search over sorted vertex sequences in lexicographic order,
/// returning the first clique of exactly `target` vertices that `accept` admits.
fn lex_search(
    g: &PrunedGraph,
    cands: Bitset,
    clique: &mut Vec<usize>,
    target: usize,
    accept: &dyn Fn(&[usize]) -> bool,
    dl: &mut Deadline,
) -> Option<Vec<usize>> {
    if clique.len() == target {
        return accept(clique).then(|| clique.clone());
    }
    let need = target - clique.len();
    if cands.count() < need || color_bound(g, &cands, need) < need || dl.check() {
        return None;
    }
    let mut rest = cands;
    while let Some(v) = rest.first() {
        rest.clear(v);
        if rest.count() + 1 < need {
            return None;
        }
        let mut next = rest.and(g.row(v));
        next.retain_above(v);
        clique.push(v);
        if let Some(found) = lex_search(g, next, clique, target, accept, dl) {
            return Some(found);
        }
        clique.pop();
        if dl.expired {
            return None;
        }
    }
    None
}

/// Lexicographically smallest maximum clique of `g`.
pub fn max_clique(g: &PrunedGraph, budget: Duration) -> CliqueResult {
    CliqueSolver::new(g, budget).max_clique()
}
