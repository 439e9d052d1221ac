//! Synthetic correspondence generator.
//!
//! All randomness comes from a ChaCha20 stream seeded with
//! `ChaCha20Rng::seed_from_u64(seed)`, so a seed reproduces the same data on
//! every platform. The draw order is fixed: transform, noise per point in
//! index order, outlier indices, outlier positions.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{CorrespondenceSet, RigidTransform, UnitQuaternion, Vec3};
use crate::ply::parse_ply;

/// Noise bound per unit of noise standard deviation.
pub const BETA_PER_SIGMA: f64 = 5.54;
/// Noise bound used when `sigma` is zero and no explicit bound is given.
pub const MIN_NOISE_BOUND: f64 = 1e-6;

const BUNNY40: &str = include_str!("../data/bunny40.ply");

/// The bundled 40-point reference cloud, inside `[0, 1]³`.
pub fn reference_cloud() -> Vec<Vec3> {
    parse_ply(BUNNY40, "bunny40.ply").expect("bundled cloud is well formed")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_points: usize,
    pub sigma: f64,
    pub outlier_rate: f64,
    pub scale_range: (f64, f64),
    pub translation_norm_max: f64,
    pub outlier_radius: f64,
    pub seed: u64,
    /// Fix the ground-truth scale to 1.
    pub known_scale: bool,
    /// Emit every source/target pair instead of index-aligned pairs.
    pub all_to_all: bool,
    /// Fraction of target points kept in all-to-all mode.
    pub overlap_fraction: f64,
    /// Overrides `BETA_PER_SIGMA · sigma`.
    pub noise_bound: Option<f64>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_points: 40,
            sigma: 0.01,
            outlier_rate: 0.0,
            scale_range: (1.0, 5.0),
            translation_norm_max: 1.0,
            outlier_radius: 5.0,
            seed: 0,
            known_scale: false,
            all_to_all: false,
            overlap_fraction: 1.0,
            noise_bound: None,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_points < 3 {
            return Err(invalid("need at least 3 points"));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(invalid("sigma must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.outlier_rate) {
            return Err(invalid("outlier rate must lie in [0, 1)"));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(invalid("scale range must be positive and ordered"));
        }
        if !(self.translation_norm_max >= 0.0 && self.outlier_radius > 0.0) {
            return Err(invalid("translation and outlier radii must be nonnegative"));
        }
        if !(self.overlap_fraction > 0.0 && self.overlap_fraction <= 1.0) {
            return Err(invalid("overlap fraction must lie in (0, 1]"));
        }
        if let Some(b) = self.noise_bound {
            if !(b > 0.0) || !b.is_finite() {
                return Err(invalid("noise bound must be positive"));
            }
        }
        Ok(())
    }

    pub fn beta(&self) -> f64 {
        self.noise_bound.unwrap_or((BETA_PER_SIGMA * self.sigma).max(MIN_NOISE_BOUND))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub correspondences: CorrespondenceSet,
    pub ground_truth: RigidTransform,
    /// True for inliers.
    pub inlier_labels: Vec<bool>,
}

fn uniform_in_ball(rng: &mut impl Rng, radius: f64) -> Vec3 {
    loop {
        let v = Vec3::from_fn(|_, _| rng.random_range(-1.0..=1.0));
        if v.norm_squared() <= 1.0 {
            return v * radius;
        }
    }
}

/// Gaussian noise resampled until its norm is at most `beta`.
fn truncated_noise(rng: &mut impl Rng, sigma: f64, beta: f64) -> Vec3 {
    if sigma == 0.0 {
        return Vec3::zeros();
    }
    loop {
        let e = Vec3::from_fn(|_, _| StandardNormal.sample(rng)) * sigma;
        if e.norm() <= beta {
            return e;
        }
    }
}

/// Source cloud: the bundled points, topped up with uniform samples in the
/// unit cube when more than 40 are requested.
fn source_cloud(rng: &mut impl Rng, n: usize) -> Vec<Vec3> {
    let mut pts = reference_cloud();
    pts.truncate(n);
    while pts.len() < n {
        pts.push(Vec3::from_fn(|_, _| rng.random::<f64>()));
    }
    pts
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let n = spec.n_points;
    let src = source_cloud(&mut rng, n);

    let scale = if spec.known_scale {
        1.0
    } else {
        rng.random_range(spec.scale_range.0..=spec.scale_range.1)
    };
    let q = loop {
        let v = nalgebra::Vector4::from_fn(|_, _| StandardNormal.sample(&mut rng));
        if let Ok(q) = UnitQuaternion::from_vector(&v) {
            break q;
        }
    };
    let t = uniform_in_ball(&mut rng, spec.translation_norm_max);
    let gt = RigidTransform::new(scale, q, t)?;
    let beta = spec.beta();

    let mut dst: Vec<Vec3> = src
        .iter()
        .map(|a| gt.apply(a) + truncated_noise(&mut rng, spec.sigma, beta))
        .collect();

    if spec.all_to_all {
        let keep = ((spec.overlap_fraction * n as f64).round() as usize).max(1);
        let mut kept = sample(&mut rng, n, keep).into_vec();
        kept.sort_unstable();
        let (mut a, mut b, mut labels) = (Vec::new(), Vec::new(), Vec::new());
        for (i, p) in src.iter().enumerate() {
            for &j in &kept {
                a.push(*p);
                b.push(dst[j]);
                labels.push(i == j);
            }
        }
        let len = a.len();
        return Ok(SyntheticData {
            correspondences: CorrespondenceSet::new(a, b, vec![beta; len])?,
            ground_truth: gt,
            inlier_labels: labels,
        });
    }

    let n_out = (spec.outlier_rate * n as f64).round() as usize;
    let mut labels = vec![true; n];
    let mut out_idx = sample(&mut rng, n, n_out).into_vec();
    out_idx.sort_unstable();
    for i in out_idx {
        labels[i] = false;
        dst[i] = uniform_in_ball(&mut rng, spec.outlier_radius);
    }
    Ok(SyntheticData {
        correspondences: CorrespondenceSet::with_uniform_bound(src, dst, beta)?,
        ground_truth: gt,
        inlier_labels: labels,
    })
}
