//! Translation-invariant measurements (pairwise differences) and
//! translation-and-rotation-invariant measurements (length ratios) over a
//! chosen graph of correspondences.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{CorrespondenceSet, Vec3};

/// Relative tolerance, times the source cloud diameter, below which a
/// difference vector counts as degenerate for ratio measurements.
pub const DEGENERATE_REL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TopologyKind {
    Complete,
    Chain,
    Custom,
}

/// Edge set over correspondence indices, each edge stored as `(i, j)` with `i < j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphTopology {
    pub kind: TopologyKind,
    pub edges: Vec<(usize, usize)>,
}

impl GraphTopology {
    pub fn complete(n: usize) -> Self {
        let mut edges = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                edges.push((i, j));
            }
        }
        Self {
            kind: TopologyKind::Complete,
            edges,
        }
    }

    pub fn chain(n: usize) -> Self {
        Self {
            kind: TopologyKind::Chain,
            edges: (1..n).map(|j| (j - 1, j)).collect(),
        }
    }

    /// Validates a user edge list: indices in range, no self loops, no
    /// duplicates. Pairs are reordered so that `i < j`.
    pub fn custom(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut out = Vec::with_capacity(edges.len());
        let mut seen = std::collections::HashSet::with_capacity(edges.len());
        for &(a, b) in edges {
            if a == b {
                return Err(invalid(format!("self loop on vertex {a}")));
            }
            if a >= n || b >= n {
                return Err(invalid(format!("edge ({a}, {b}) out of range for {n} vertices")));
            }
            let e = (a.min(b), a.max(b));
            if !seen.insert(e) {
                return Err(invalid(format!("duplicate edge ({}, {})", e.0, e.1)));
            }
            out.push(e);
        }
        Ok(Self {
            kind: TopologyKind::Custom,
            edges: out,
        })
    }
}

/// Pairwise difference measurement on edge `(i, j)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tim {
    pub i: usize,
    pub j: usize,
    pub a_bar: Vec3,
    pub b_bar: Vec3,
    pub beta_bar: f64,
}

/// Length-ratio measurement derived from the TIM at index `edge`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trim {
    pub edge: usize,
    pub i: usize,
    pub j: usize,
    pub s_meas: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone)]
pub struct MeasurementGraph {
    pub n_vertices: usize,
    pub topology: GraphTopology,
    pub tims: Vec<Tim>,
    /// Ratio measurement per edge, `None` for degenerate edges.
    pub trims: Vec<Option<Trim>>,
    /// Edge indices skipped when forming ratio measurements.
    pub degenerate_edges: Vec<usize>,
}

impl MeasurementGraph {
    pub fn build(c: &CorrespondenceSet, topology: GraphTopology) -> Result<Self> {
        let tims = build_tims(c, &topology)?;
        let eps = DEGENERATE_REL_TOL * cloud_diameter(&c.source);
        let (trim_list, degenerate_edges) = build_trims(&tims, eps);
        let mut trims = vec![None; tims.len()];
        for t in trim_list {
            trims[t.edge] = Some(t);
        }
        Ok(Self {
            n_vertices: c.len(),
            topology,
            tims,
            trims,
            degenerate_edges,
        })
    }

    pub fn valid_trims(&self) -> impl Iterator<Item = &Trim> {
        self.trims.iter().flatten()
    }
}

/// One TIM per edge: `ā = a_j − a_i`, `b̄ = b_j − b_i`, `β̄ = β_i + β_j`.
pub fn build_tims(c: &CorrespondenceSet, g: &GraphTopology) -> Result<Vec<Tim>> {
    let n = c.len();
    g.edges
        .iter()
        .map(|&(i, j)| {
            if i >= n || j >= n {
                return Err(invalid(format!("edge ({i}, {j}) out of range for {n} points")));
            }
            Ok(Tim {
                i,
                j,
                a_bar: c.source[j] - c.source[i],
                b_bar: c.target[j] - c.target[i],
                beta_bar: c.noise_bounds[i] + c.noise_bounds[j],
            })
        })
        .collect()
}

/// Ratio measurements `s = ‖b̄‖/‖ā‖`, `α = β̄/‖ā‖`. Edges with `‖ā‖ ≤ eps`
/// are skipped and returned as the second element.
pub fn build_trims(tims: &[Tim], eps: f64) -> (Vec<Trim>, Vec<usize>) {
    let mut trims = Vec::with_capacity(tims.len());
    let mut skipped = Vec::new();
    for (edge, t) in tims.iter().enumerate() {
        let na = t.a_bar.norm();
        if na <= eps {
            skipped.push(edge);
            continue;
        }
        trims.push(Trim {
            edge,
            i: t.i,
            j: t.j,
            s_meas: t.b_bar.norm() / na,
            alpha: t.beta_bar / na,
        });
    }
    (trims, skipped)
}

/// Largest pairwise distance in the cloud.
pub fn cloud_diameter(points: &[Vec3]) -> f64 {
    let mut best2 = 0.0f64;
    for (k, p) in points.iter().enumerate() {
        for q in &points[k + 1..] {
            best2 = best2.max((p - q).norm_squared());
        }
    }
    best2.sqrt()
}
