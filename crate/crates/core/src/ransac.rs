//! Three-point RANSAC baseline for similarity transforms, used only for
//! benchmark comparison.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, RegError, Result};
use crate::geometry::{CorrespondenceSet, RigidTransform, Vec3};
use crate::rotation::horn_weighted;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacOptions {
    pub max_iters: usize,
    /// Residual norm below which a correspondence counts as an inlier.
    pub inlier_threshold: f64,
    /// Stop once a hypothesis this likely to be outlier-free was sampled.
    pub confidence: f64,
    pub seed: u64,
    pub known_scale: Option<f64>,
}

impl Default for RansacOptions {
    fn default() -> Self {
        Self {
            max_iters: 1000,
            inlier_threshold: 0.1,
            confidence: 0.99,
            seed: 0,
            known_scale: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RansacResult {
    pub transform: RigidTransform,
    pub inliers: Vec<usize>,
    pub iterations: usize,
}

/// Least-squares similarity fit; `None` for degenerate (collinear) input.
pub fn fit_similarity(src: &[Vec3], dst: &[Vec3], known_scale: Option<f64>) -> Option<RigidTransform> {
    let n = src.len() as f64;
    let ca = src.iter().sum::<Vec3>() / n;
    let cb = dst.iter().sum::<Vec3>() / n;
    let a: Vec<Vec3> = src.iter().map(|p| p - ca).collect();
    let b: Vec<Vec3> = dst.iter().map(|p| p - cb).collect();
    let h = horn_weighted(&a, &b, &vec![1.0; a.len()]);
    if h.degenerate {
        return None;
    }
    let r = h.rotation.to_rotation_matrix();
    let s = match known_scale {
        Some(s) => s,
        None => {
            let num: f64 = a.iter().zip(&b).map(|(x, y)| y.dot(&(r * x))).sum();
            let den: f64 = a.iter().map(|x| x.norm_squared()).sum();
            num / den
        }
    };
    if !(s > 0.0) || !s.is_finite() {
        return None;
    }
    RigidTransform::new(s, h.rotation, cb - r * ca * s).ok()
}

fn inliers_of(c: &CorrespondenceSet, t: &RigidTransform, thr: f64) -> Vec<usize> {
    let r = t.rotation_matrix();
    (0..c.len())
        .filter(|&i| (c.target[i] - r * c.source[i] * t.scale - t.translation).norm() <= thr)
        .collect()
}

pub fn ransac_baseline(c: &CorrespondenceSet, opts: &RansacOptions) -> Result<RansacResult> {
    let n = c.len();
    if n < 3 {
        return Err(RegError::TooFewMeasurements { needed: 3, got: n });
    }
    if !(opts.inlier_threshold > 0.0) || !(opts.confidence > 0.0 && opts.confidence < 1.0) {
        return Err(invalid("threshold must be positive and confidence in (0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<(RigidTransform, Vec<usize>)> = None;
    let mut needed = opts.max_iters;
    let mut it = 0;
    while it < needed.min(opts.max_iters) {
        it += 1;
        let idx = sample(&mut rng, n, 3);
        let src: Vec<Vec3> = idx.iter().map(|i| c.source[i]).collect();
        let dst: Vec<Vec3> = idx.iter().map(|i| c.target[i]).collect();
        let Some(t) = fit_similarity(&src, &dst, opts.known_scale) else {
            continue;
        };
        let inl = inliers_of(c, &t, opts.inlier_threshold);
        if best.as_ref().is_none_or(|(_, b)| inl.len() > b.len()) {
            let w = inl.len() as f64 / n as f64;
            let p_good = w.powi(3);
            if p_good >= 1.0 {
                needed = it;
            } else if p_good > 0.0 {
                let k = (1.0 - opts.confidence).ln() / (1.0 - p_good).ln();
                needed = (k.ceil() as usize).max(it);
            }
            best = Some((t, inl));
        }
    }
    let (mut t, mut inl) = best.unwrap_or((RigidTransform::identity(), Vec::new()));
    if inl.len() >= 3 {
        let src: Vec<Vec3> = inl.iter().map(|&i| c.source[i]).collect();
        let dst: Vec<Vec3> = inl.iter().map(|&i| c.target[i]).collect();
        if let Some(refit) = fit_similarity(&src, &dst, opts.known_scale) {
            let refit_inl = inliers_of(c, &refit, opts.inlier_threshold);
            if refit_inl.len() >= inl.len() {
                t = refit;
                inl = refit_inl;
            }
        }
    }
    Ok(RansacResult {
        transform: t,
        inliers: inl,
        iterations: it,
    })
}
