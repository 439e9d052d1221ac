//! `certreg` command line: synthetic data, registration, certification and
//! outlier-rate sweeps.
//!
//! Exit codes: 0 success, 1 bad arguments or input values, 2 too few
//! inliers, 3 unreadable or malformed files.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use certreg::bench::{run_bench, BenchConfig, BenchRecord, Method};
use certreg::certifier::{certify, CandidateSolution, CertifyOptions};
use certreg::pipeline::{compute_bounds, register, ErrorBounds, RegisterOptions, RegistrationResult, Topology};
use certreg::ply::{read_ply, write_labels, write_ply};
use certreg::rotation::RotationProblem;
use certreg::synth::{generate, SyntheticSpec};
use certreg::{CorrespondenceSet, RegError, RigidTransform, TlsConfig, UnitQuaternion, Vec3};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "certreg", version, about = "Outlier-robust point cloud registration")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic source/target pair, inlier labels and ground truth.
    Generate(GenerateArgs),
    /// Register two index-aligned PLY clouds and print the result as JSON.
    Register(RegisterArgs),
    /// Certify a rotation candidate stored as JSON.
    Certify(CertifyArgs),
    /// Sweep outlier rates on synthetic data and print a summary table.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 40)]
    n: usize,
    #[arg(long, default_value_t = 0.0)]
    outlier_rate: f64,
    #[arg(long, default_value_t = 0.01)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fix the ground-truth scale to 1.
    #[arg(long)]
    known_scale: bool,
    /// Emit all source/target pairs, keeping this fraction of targets.
    #[arg(long)]
    all_to_all: Option<f64>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum TopologyArg {
    Complete,
    Chain,
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    dst: PathBuf,
    /// Inlier noise bound, shared by all correspondences.
    #[arg(long)]
    beta: f64,
    #[arg(long)]
    known_scale: Option<f64>,
    #[arg(long)]
    certify: bool,
    /// Also report a-posteriori error bounds.
    #[arg(long)]
    bounds: bool,
    #[arg(long, value_enum, default_value = "complete")]
    topology: TopologyArg,
    #[arg(long, default_value_t = 1.0)]
    cbar_sq: f64,
    /// Write the JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CertifyArgs {
    /// JSON file with `a`, `b`, `beta`, `cbar_sq`, `rotation` ([x, y, z, w])
    /// and optionally `theta`.
    input: PathBuf,
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-3)]
    eta_target: f64,
    /// Skip the residual precheck and always run the splitting.
    #[arg(long)]
    no_local_check: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Cascade,
    Ransac,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "0,0.5,0.9")]
    rates: Vec<f64>,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 40)]
    trials: usize,
    #[arg(long, default_value_t = 0.01)]
    sigma: f64,
    #[arg(long)]
    known_scale: bool,
    #[arg(long)]
    certify: bool,
    #[arg(long, value_enum, default_value = "cascade")]
    method: MethodArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the full JSON record here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct GroundTruth {
    transform: RigidTransform,
    noise_bound: f64,
    spec: SyntheticSpec,
}

#[derive(Serialize)]
struct RegisterOutput {
    transform: RigidTransform,
    rotation_matrix: [[f64; 3]; 3],
    /// Certificate bound; `null` when certification was off or skipped.
    eta: Option<f64>,
    result: RegistrationResult,
    bounds: Option<ErrorBounds>,
}

#[derive(Deserialize)]
struct CertifyInput {
    a: Vec<[f64; 3]>,
    b: Vec<[f64; 3]>,
    beta: Vec<f64>,
    #[serde(default = "one")]
    cbar_sq: f64,
    rotation: [f64; 4],
    theta: Option<Vec<i8>>,
}

fn one() -> f64 {
    1.0
}

enum Failure {
    Usage(String),
    Reg(RegError),
}

impl From<RegError> for Failure {
    fn from(e: RegError) -> Self {
        Failure::Reg(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn io_failure(path: &Path, source: std::io::Error) -> Failure {
    Failure::Reg(RegError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_json(path: Option<&Path>, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("result types serialize") + "\n";
    match path {
        Some(p) => fs::write(p, text).map_err(|e| io_failure(p, e)),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| io_failure(Path::new("<stdout>"), e)),
    }
}

fn cmd_generate(a: &GenerateArgs) -> CliResult<()> {
    let spec = SyntheticSpec {
        n_points: a.n,
        sigma: a.sigma,
        outlier_rate: a.outlier_rate,
        seed: a.seed,
        known_scale: a.known_scale,
        all_to_all: a.all_to_all.is_some(),
        overlap_fraction: a.all_to_all.unwrap_or(1.0),
        ..Default::default()
    };
    let d = generate(&spec)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| io_failure(&a.out_dir, e))?;
    write_ply(&a.out_dir.join("src.ply"), &d.correspondences.source)?;
    write_ply(&a.out_dir.join("dst.ply"), &d.correspondences.target)?;
    write_labels(&a.out_dir.join("labels.txt"), &d.inlier_labels)?;
    let gt = GroundTruth {
        transform: d.ground_truth,
        noise_bound: spec.beta(),
        spec,
    };
    write_json(Some(&a.out_dir.join("ground_truth.json")), &gt)
}

fn cmd_register(a: &RegisterArgs) -> CliResult<()> {
    let src = read_ply(&a.src)?;
    let dst = read_ply(&a.dst)?;
    if src.len() != dst.len() {
        return Err(Failure::Usage(format!(
            "{} has {} points but {} has {}",
            a.src.display(),
            src.len(),
            a.dst.display(),
            dst.len()
        )));
    }
    let c = CorrespondenceSet::with_uniform_bound(src, dst, a.beta)?;
    let cfg = TlsConfig {
        cbar_sq: a.cbar_sq,
        ..Default::default()
    };
    let opts = RegisterOptions {
        known_scale: a.known_scale,
        certify: a.certify,
        topology: match a.topology {
            TopologyArg::Complete => Topology::Complete,
            TopologyArg::Chain => Topology::Chain,
        },
        ..Default::default()
    };
    let result = register(&c, &cfg, &opts)?;
    let bounds = if a.bounds { Some(compute_bounds(&result, &c, &cfg)?) } else { None };
    let r = result.transform.rotation_matrix();
    let out = RegisterOutput {
        transform: result.transform,
        rotation_matrix: [0, 1, 2].map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)]]),
        eta: result.certificate.as_ref().map(|c| c.eta),
        result,
        bounds,
    };
    write_json(a.out.as_deref(), &out)
}

fn cmd_certify(a: &CertifyArgs) -> CliResult<()> {
    let text = fs::read_to_string(&a.input).map_err(|e| io_failure(&a.input, e))?;
    let input: CertifyInput = serde_json::from_str(&text).map_err(|e| {
        Failure::Reg(RegError::Parse {
            path: a.input.display().to_string(),
            line: e.line(),
            msg: e.to_string(),
        })
    })?;
    let v = |x: &[f64; 3]| Vec3::new(x[0], x[1], x[2]);
    let p = RotationProblem::new(
        input.a.iter().map(v).collect(),
        input.b.iter().map(v).collect(),
        input.beta,
        input.cbar_sq,
    )?;
    let [x, y, z, w] = input.rotation;
    let q = UnitQuaternion::from_vector(&nalgebra::Vector4::new(x, y, z, w))?;
    let theta = input.theta.unwrap_or_else(|| {
        p.residuals_sq(&q.to_rotation_matrix())
            .iter()
            .map(|&r| if r <= p.cbar_sq { 1 } else { -1 })
            .collect()
    });
    let cand = CandidateSolution::new(&p, q, theta)?;
    let opts = CertifyOptions {
        max_iters: a.max_iters,
        eta_target: a.eta_target,
        local_check: !a.no_local_check,
        ..Default::default()
    };
    write_json(None, &certify(&p, &cand, &opts)?)
}

fn threads() -> usize {
    let avail = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("REG_THREADS").ok().and_then(|s| s.parse::<usize>().ok()) {
        Some(cap) if cap > 0 => cap.min(avail),
        _ => avail,
    }
}

fn print_table(rec: &BenchRecord) {
    println!(
        "{:>6} {:>6} {:>8} {:>9} {:>12} {:>12} {:>10} {:>9}",
        "rate", "trials", "success", "certified", "rot_med_deg", "trans_med", "scale_med", "sec_med"
    );
    for s in &rec.aggregate {
        println!(
            "{:>6.3} {:>6} {:>8} {:>9} {:>12.4} {:>12.5} {:>10.5} {:>9.4}",
            s.outlier_rate,
            s.trials,
            s.successes,
            s.certified,
            s.rotation_error_rad.median.to_degrees(),
            s.translation_error.median,
            s.scale_error.median,
            s.total_seconds.median
        );
    }
}

fn cmd_bench(a: &BenchArgs) -> CliResult<()> {
    let cfg = BenchConfig {
        n_points: a.n,
        sigma: a.sigma,
        rates: a.rates.clone(),
        trials: a.trials,
        known_scale: a.known_scale,
        certify: a.certify,
        method: match a.method {
            MethodArg::Cascade => Method::Cascade,
            MethodArg::Ransac => Method::Ransac,
        },
        base_seed: a.seed,
        ..Default::default()
    };
    let rec = run_bench(&cfg, threads())?;
    print_table(&rec);
    match &a.out {
        Some(p) => write_json(Some(p), &rec),
        None => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let outcome = match &cli.cmd {
        Cmd::Generate(a) => cmd_generate(a),
        Cmd::Register(a) => cmd_register(a),
        Cmd::Certify(a) => cmd_certify(a),
        Cmd::Bench(a) => cmd_bench(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Reg(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                RegError::InsufficientInliers { .. } => 2,
                RegError::Io { .. } | RegError::Parse { .. } => 3,
                _ => 1,
            })
        }
    }
}
