//! Monte Carlo benchmark over outlier rates, with one record type for both
//! the registration cascade and the RANSAC baseline.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{geodesic_rotation_error, RigidTransform, TlsConfig};
use crate::pipeline::{register, RegisterOptions, StageTimings};
use crate::ransac::{ransac_baseline, RansacOptions};
use crate::synth::{generate, SyntheticSpec};

pub const SCHEMA_VERSION: &str = "1.0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Cascade,
    Ransac,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub n_points: usize,
    pub sigma: f64,
    pub rates: Vec<f64>,
    pub trials: usize,
    pub known_scale: bool,
    pub certify: bool,
    pub method: Method,
    pub base_seed: u64,
    pub ransac_iters: usize,
    /// Rotation error, in radians, below which a trial counts as a success.
    pub success_rotation_rad: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_points: 100,
            sigma: 0.01,
            rates: vec![0.0, 0.5, 0.9],
            trials: 40,
            known_scale: false,
            certify: false,
            method: Method::Cascade,
            base_seed: 0,
            ransac_iters: 1000,
            success_rotation_rad: 5f64.to_radians(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRun {
    pub seed: u64,
    pub outlier_rate: f64,
    /// `None` when the method returned an error.
    pub rotation_error_rad: Option<f64>,
    pub translation_error: Option<f64>,
    pub scale_error: Option<f64>,
    pub certified: bool,
    pub timings: StageTimings,
    pub total_seconds: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSummary {
    pub outlier_rate: f64,
    pub trials: usize,
    pub failures: usize,
    pub successes: usize,
    pub certified: usize,
    pub rotation_error_rad: Quantiles,
    pub translation_error: Quantiles,
    pub scale_error: Quantiles,
    pub total_seconds: Quantiles,
}

/// Failed runs enter as `+∞`, so they can only push quantiles up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub q10: f64,
    pub median: f64,
    pub q90: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub schema_version: String,
    pub config: BenchConfig,
    pub runs: Vec<BenchRun>,
    pub aggregate: Vec<RateSummary>,
}

/// Linear-interpolated quantile of ascending data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    if lo == hi || sorted[hi] == sorted[lo] {
        return sorted[lo];
    }
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn quantiles(values: impl Iterator<Item = f64>) -> Quantiles {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    Quantiles {
        q10: quantile(&v, 0.1),
        median: quantile(&v, 0.5),
        q90: quantile(&v, 0.9),
        max: v.last().copied().unwrap_or(f64::NAN),
    }
}

pub fn transform_errors(est: &RigidTransform, gt: &RigidTransform) -> (f64, f64, f64) {
    (
        geodesic_rotation_error(&est.rotation_matrix(), &gt.rotation_matrix()),
        (est.translation - gt.translation).norm(),
        (est.scale - gt.scale).abs(),
    )
}

pub fn run_trial(cfg: &BenchConfig, rate: f64, seed: u64) -> Result<BenchRun> {
    let spec = SyntheticSpec {
        n_points: cfg.n_points,
        sigma: cfg.sigma,
        outlier_rate: rate,
        seed,
        known_scale: cfg.known_scale,
        ..Default::default()
    };
    let data = generate(&spec)?;
    let c = &data.correspondences;
    let beta = spec.beta();
    let t0 = Instant::now();
    let outcome = match cfg.method {
        Method::Cascade => {
            let opts = RegisterOptions {
                known_scale: cfg.known_scale.then_some(data.ground_truth.scale),
                certify: cfg.certify,
                ..Default::default()
            };
            register(c, &TlsConfig::default(), &opts).map(|r| {
                let certified = r.certificate.as_ref().is_some_and(|c| c.is_certified());
                (r.transform, certified, r.stage_timings)
            })
        }
        Method::Ransac => {
            let opts = RansacOptions {
                max_iters: cfg.ransac_iters,
                inlier_threshold: beta,
                seed,
                known_scale: cfg.known_scale.then_some(data.ground_truth.scale),
                ..Default::default()
            };
            ransac_baseline(c, &opts).map(|r| (r.transform, false, StageTimings::default()))
        }
    };
    let total_seconds = t0.elapsed().as_secs_f64();
    Ok(match outcome {
        Ok((t, certified, timings)) => {
            let (er, et, es) = transform_errors(&t, &data.ground_truth);
            BenchRun {
                seed,
                outlier_rate: rate,
                rotation_error_rad: Some(er),
                translation_error: Some(et),
                scale_error: Some(es),
                certified,
                timings,
                total_seconds,
                error: None,
            }
        }
        Err(e) => BenchRun {
            seed,
            outlier_rate: rate,
            rotation_error_rad: None,
            translation_error: None,
            scale_error: None,
            certified: false,
            timings: StageTimings::default(),
            total_seconds,
            error: Some(e.to_string()),
        },
    })
}

pub fn summarize(cfg: &BenchConfig, runs: &[BenchRun]) -> Vec<RateSummary> {
    let inf = |v: Option<f64>| v.unwrap_or(f64::INFINITY);
    cfg.rates
        .iter()
        .map(|&rate| {
            let rs: Vec<&BenchRun> = runs.iter().filter(|r| r.outlier_rate == rate).collect();
            RateSummary {
                outlier_rate: rate,
                trials: rs.len(),
                failures: rs.iter().filter(|r| r.error.is_some()).count(),
                successes: rs
                    .iter()
                    .filter(|r| r.rotation_error_rad.is_some_and(|e| e < cfg.success_rotation_rad))
                    .count(),
                certified: rs.iter().filter(|r| r.certified).count(),
                rotation_error_rad: quantiles(rs.iter().map(|r| inf(r.rotation_error_rad))),
                translation_error: quantiles(rs.iter().map(|r| inf(r.translation_error))),
                scale_error: quantiles(rs.iter().map(|r| inf(r.scale_error))),
                total_seconds: quantiles(rs.iter().map(|r| r.total_seconds)),
            }
        })
        .collect()
}

/// Runs every (rate, trial) pair on up to `threads` workers. Trial `k` uses
/// seed `base_seed + k` at every rate; output order is independent of
/// scheduling.
pub fn run_bench(cfg: &BenchConfig, threads: usize) -> Result<BenchRecord> {
    if cfg.rates.is_empty() || cfg.trials == 0 {
        return Err(invalid("need at least one rate and one trial"));
    }
    let jobs: Vec<(f64, u64)> = cfg
        .rates
        .iter()
        .flat_map(|&r| (0..cfg.trials as u64).map(move |k| (r, cfg.base_seed + k)))
        .collect();
    let slots: Vec<Mutex<Option<Result<BenchRun>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, jobs.len()) {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(rate, seed)) = jobs.get(k) else { break };
                let run = run_trial(cfg, rate, seed);
                *slots[k].lock().expect("result slot") = Some(run);
            });
        }
    });
    let runs = slots
        .into_iter()
        .map(|m| m.into_inner().expect("result slot").expect("every job ran"))
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchRecord {
        schema_version: SCHEMA_VERSION.to_string(),
        aggregate: summarize(cfg, &runs),
        config: cfg.clone(),
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert!((quantile(&v, 0.5) - 2.5).abs() < 1e-15);
        assert_eq!(quantile(&[1.0, f64::INFINITY], 0.0), 1.0);
    }

    #[test]
    fn parallel_run_matches_serial() {
        let cfg = BenchConfig {
            n_points: 30,
            rates: vec![0.0, 0.5],
            trials: 3,
            known_scale: true,
            ..Default::default()
        };
        let a = run_bench(&cfg, 1).unwrap();
        let b = run_bench(&cfg, 4).unwrap();
        let strip = |r: &BenchRecord| -> Vec<(u64, Option<f64>)> { r.runs.iter().map(|x| (x.seed, x.rotation_error_rad)).collect() };
        assert_eq!(strip(&a), strip(&b));
        assert_eq!(a.aggregate.len(), 2);
        assert_eq!(a.aggregate[0].trials, 3);
    }
}
