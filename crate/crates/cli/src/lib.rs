//! Command-line front end: simulate datasets, estimate, check Jacobians and benchmark.

pub mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use cmrse::factors::check::{run_jacobian_suite, CheckContext, CheckSettings};
use cmrse::model::{
    measurements_from_csv, measurements_to_csv, problem_from_config, problem_to_config, truth_from_csv,
    truth_to_csv, EstimationProblem, ModelError, NoiseLevels, SystemState,
};
use cmrse::sim::{builtin, generate, BuiltinOptions, Dataset, SimError};
use cmrse::solver::{solve, SolveError};

pub use report::RunReport;

pub const CONFIG_FILE: &str = "config.toml";
pub const MEASUREMENTS_FILE: &str = "measurements.csv";
pub const TRUTH_FILE: &str = "truth.csv";
pub const SIDECAR_FILE: &str = "run.json";

#[derive(Debug, Parser)]
#[command(name = "cmrse", version, about = "State estimation for coupled continuum multi-robot systems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (config, measurements and truth) from a built-in scenario.
    Simulate(SimulateArgs),
    /// Estimate the system state from a config and a measurement file.
    Estimate(EstimateArgs),
    /// Verify every analytic Jacobian against central finite differences.
    Check(CheckArgs),
    /// Time repeated solves for several node counts.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Args)]
pub struct OutArgs {
    /// Output directory.
    #[arg(long, env = "CMRSE_OUT_DIR", default_value = "cmrse_out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct NoiseArgs {
    /// Position noise standard deviation, m.
    #[arg(long, default_value_t = NoiseLevels::default().position)]
    pub noise_sigma_position: f64,
    /// Orientation noise standard deviation, rad.
    #[arg(long, default_value_t = NoiseLevels::default().orientation)]
    pub noise_sigma_orientation: f64,
    /// FBG strain noise standard deviation, unitless.
    #[arg(long, default_value_t = NoiseLevels::default().strain)]
    pub noise_sigma_strain: f64,
}

impl NoiseArgs {
    pub fn levels(&self) -> NoiseLevels {
        NoiseLevels {
            position: self.noise_sigma_position,
            orientation: self.noise_sigma_orientation,
            strain: self.noise_sigma_strain,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// Built-in scenario name.
    #[arg(long, default_value = "two_robot_ee")]
    pub scenario: String,
    /// Nodes on a 240 mm robot; other lengths keep the same spacing.
    #[arg(long)]
    pub nodes: Option<usize>,
    #[command(flatten)]
    pub noise: NoiseArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Sensors {
    Fbg,
    Pose,
    Both,
}

#[derive(Debug, Clone, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub measurements: PathBuf,
    /// Ground truth; adds an error table.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Sensors::Both)]
    pub sensors: Sensors,
    /// Resample robot rows every this many metres.
    #[arg(long)]
    pub interp: Option<f64>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args)]
pub struct CheckArgs {
    /// Topology whose intervals, fibers and coupling offsets seed the random states.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    /// Dataset config written by `simulate`; its scenario and noise levels are reused.
    #[arg(long, conflicts_with = "scenario")]
    pub config: Option<PathBuf>,
    /// Built-in scenario name.
    #[arg(long)]
    pub scenario: Option<String>,
    /// Node counts on a 240 mm robot.
    #[arg(long, value_delimiter = ',', default_value = "25,13,7")]
    pub nodes: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    pub repeats: usize,
    #[arg(long, value_enum, default_value_t = Sensors::Both)]
    pub sensors: Sensors,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {message}")]
    Input { path: String, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("jacobian check failed")]
    CheckFailed,
}

impl CliError {
    /// 0 ok, 1 other failure, 2 invalid input, 3 under-constrained, 4 stalled.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input { .. } | CliError::Invalid(_) => 2,
            CliError::Sim(SimError::UnknownScenario(_) | SimError::InvalidOption(_) | SimError::Model(_)) => 2,
            CliError::Solve(SolveError::Model(_)) => 2,
            CliError::Solve(SolveError::UnderConstrained { .. }) => 3,
            CliError::Solve(SolveError::Stalled { .. }) => 4,
            _ => 1,
        }
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Input {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn input_error(path: &Path, e: ModelError) -> CliError {
    CliError::Input {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.display().to_string(),
        source,
    })
}

fn io_at(dir: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: dir.display().to_string(),
        source,
    }
}

/// Drops the measurement families `sensors` excludes.
pub fn select_sensors(problem: &mut EstimationProblem, sensors: Sensors) {
    match sensors {
        Sensors::Fbg => problem.measurements.pose.clear(),
        Sensors::Pose => problem.measurements.fbg.clear(),
        Sensors::Both => {}
    }
}

/// Generated dataset of a built-in scenario.
pub fn simulate_dataset(scenario: &str, nodes: Option<usize>, noise: NoiseLevels, seed: u64) -> Result<Dataset, CliError> {
    let options = BuiltinOptions {
        nodes,
        noise,
        seed,
        ..Default::default()
    };
    Ok(generate(&builtin(scenario, &options)?)?)
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<Vec<PathBuf>, CliError> {
    if args.nodes.is_some_and(|k| k < 2) {
        return Err(CliError::Invalid("--nodes must be at least 2".into()));
    }
    let noise = args.noise.levels();
    if [noise.position, noise.orientation, noise.strain].iter().any(|v| !(*v >= 0.0)) {
        return Err(CliError::Invalid("noise sigmas must be non-negative".into()));
    }
    let data = simulate_dataset(&args.scenario, args.nodes, noise, args.seed)?;
    let dir = &args.out.out;
    create_dir(dir)?;
    let files = [
        (CONFIG_FILE, problem_to_config(&data.problem)),
        (
            MEASUREMENTS_FILE,
            measurements_to_csv(&data.problem.measurements).map_err(|e| CliError::Invalid(e.to_string()))?,
        ),
        (TRUTH_FILE, truth_to_csv(&data.truth)),
    ];
    let mut out = Vec::new();
    for (name, text) in files {
        let path = dir.join(name);
        write(&path, &text)?;
        out.push(path);
    }
    Ok(out)
}

/// Problem and optional truth of an `estimate` invocation, with the sensor selection applied.
pub fn load_inputs(args: &EstimateArgs) -> Result<(EstimationProblem, Option<SystemState>), CliError> {
    let config = read(&args.config)?;
    let mut problem = problem_from_config(&config).map_err(|e| input_error(&args.config, e))?;
    let text = read(&args.measurements)?;
    problem.measurements =
        measurements_from_csv(&text, &problem.topology).map_err(|e| input_error(&args.measurements, e))?;
    problem.check_structure().map_err(|e| input_error(&args.config, e))?;
    let truth = match &args.truth {
        Some(path) => Some(truth_from_csv(&read(path)?, &problem.topology).map_err(|e| input_error(path, e))?),
        None => None,
    };
    select_sensors(&mut problem, args.sensors);
    Ok((problem, truth))
}

#[derive(Debug, Serialize)]
struct Sidecar<'a> {
    command: &'a str,
    version: &'a str,
    flags: serde_json::Value,
    metadata: &'a std::collections::BTreeMap<String, String>,
    converged: bool,
    iterations: usize,
    final_cost: f64,
    timing_ms: serde_json::Value,
    files: Vec<String>,
}

pub fn cmd_estimate(args: &EstimateArgs) -> Result<RunReport, CliError> {
    if args.interp.is_some_and(|s| !(s > 0.0)) {
        return Err(CliError::Invalid("--interp must be positive".into()));
    }
    let (problem, truth) = load_inputs(args)?;
    let est = solve(&problem)?;
    if !est.diagnostics.converged {
        return Err(SolveError::Stalled {
            diagnostics: Box::new(est.diagnostics),
        }
        .into());
    }
    let report = RunReport::build(&problem, &est, truth.as_ref(), args.interp)?;
    let dir = &args.out.out;
    create_dir(dir)?;
    let mut files = report.write(dir).map_err(io_at(dir))?;
    files.push(SIDECAR_FILE.into());
    let ms = |d: std::time::Duration| d.as_secs_f64() * 1e3;
    let sidecar = Sidecar {
        command: "estimate",
        version: env!("CARGO_PKG_VERSION"),
        flags: serde_json::json!({
            "config": args.config.display().to_string(),
            "measurements": args.measurements.display().to_string(),
            "truth": args.truth.as_ref().map(|p| p.display().to_string()),
            "sensors": args.sensors,
            "interp": args.interp,
        }),
        metadata: &problem.metadata,
        converged: report.converged,
        iterations: report.iterations.len(),
        final_cost: report.final_cost,
        timing_ms: serde_json::json!({
            "assembly": ms(report.timing.assembly),
            "factorization": ms(report.timing.factorization),
            "total": ms(report.timing.total),
        }),
        files,
    };
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    write(&dir.join(SIDECAR_FILE), &json)?;
    Ok(report)
}

/// One line per factor family and singular locus.
pub fn cmd_check(args: &CheckArgs) -> Result<Vec<String>, CliError> {
    let ctx = match &args.config {
        Some(path) => CheckContext::from_problem(&problem_from_config(&read(path)?).map_err(|e| input_error(path, e))?),
        None => CheckContext::default(),
    };
    let settings = CheckSettings {
        trials: args.trials,
        seed: args.seed,
        ..Default::default()
    };
    let report = run_jacobian_suite(&settings, &ctx);
    let verdict = |ok: bool| if ok { "PASS" } else { "FAIL" };
    let mut lines: Vec<String> = report
        .results
        .iter()
        .map(|r| {
            format!(
                "{} {:<8} evaluated {} excluded {} max relative error {:.3e} (tolerance {:e})",
                verdict(r.passed),
                r.kind.name(),
                r.evaluated,
                r.excluded,
                r.max_relative_error,
                settings.tolerance
            )
        })
        .collect();
    lines.extend(
        report
            .loci
            .iter()
            .map(|l| format!("{} locus    {} ({} states)", verdict(l.passed), l.name, l.trials)),
    );
    if report.passed() {
        Ok(lines)
    } else {
        for l in &lines {
            eprintln!("{l}");
        }
        Err(CliError::CheckFailed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub nodes: usize,
    pub repeats: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub max_ms: f64,
    pub median_ms: f64,
    /// Mean end-effector position error, m.
    pub ee_error: f64,
}

/// Scenario and noise a bench run regenerates datasets from.
fn bench_source(args: &BenchArgs) -> Result<(String, NoiseLevels), CliError> {
    match (&args.config, &args.scenario) {
        (Some(path), _) => {
            let problem = problem_from_config(&read(path)?).map_err(|e| input_error(path, e))?;
            let meta = |key: &str| problem.metadata.get(key);
            let name = meta("scenario").cloned().ok_or_else(|| CliError::Input {
                path: path.display().to_string(),
                message: "no `scenario` entry in the metadata".into(),
            })?;
            let d = NoiseLevels::default();
            let sigma = |key: &str, default: f64| -> Result<f64, CliError> {
                meta(key).map_or(Ok(default), |v| {
                    v.parse().map_err(|_| CliError::Input {
                        path: path.display().to_string(),
                        message: format!("metadata `{key}` is not a number"),
                    })
                })
            };
            let noise = NoiseLevels {
                position: sigma("sigma_position", d.position)?,
                orientation: sigma("sigma_orientation", d.orientation)?,
                strain: sigma("sigma_strain", d.strain)?,
            };
            Ok((name, noise))
        }
        (None, Some(name)) => Ok((name.clone(), NoiseLevels::default())),
        (None, None) => Ok(("two_robot_ee".into(), NoiseLevels::default())),
    }
}

/// Solve timings over `repeats` seeds per node count; seeds are `seed, seed + 1, ...`.
pub fn run_bench(
    scenario: &str,
    noise: NoiseLevels,
    nodes: &[usize],
    repeats: usize,
    sensors: Sensors,
    seed: u64,
) -> Result<Vec<BenchRow>, CliError> {
    if repeats == 0 {
        return Err(CliError::Invalid("--repeats must be positive".into()));
    }
    let mut rows = Vec::new();
    for &k in nodes {
        if k < 2 {
            return Err(CliError::Invalid("node counts must be at least 2".into()));
        }
        let mut times = Vec::with_capacity(repeats);
        let mut error = 0.0;
        for i in 0..repeats {
            let mut data = simulate_dataset(scenario, Some(k), noise, seed + i as u64)?;
            select_sensors(&mut data.problem, sensors);
            let start = Instant::now();
            let est = solve(&data.problem)?;
            times.push(start.elapsed().as_secs_f64() * 1e3);
            error += match est.mean.bodies.first() {
                Some(ee) => (ee.origin() - data.truth.bodies[0].origin()).norm(),
                None => {
                    let r = est.mean.robots.len() - 1;
                    let tip = est.mean.robots[r].len() - 1;
                    (est.mean.robots[r][tip].pose.origin() - data.truth.robots[r][tip].pose.origin()).norm()
                }
            };
        }
        let n = repeats as f64;
        let mean = times.iter().sum::<f64>() / n;
        let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        let mut sorted = times.clone();
        sorted.sort_by(f64::total_cmp);
        let median = if repeats % 2 == 1 {
            sorted[repeats / 2]
        } else {
            0.5 * (sorted[repeats / 2 - 1] + sorted[repeats / 2])
        };
        rows.push(BenchRow {
            nodes: k,
            repeats,
            mean_ms: mean,
            std_ms: var.sqrt(),
            max_ms: sorted[repeats - 1],
            median_ms: median,
            ee_error: error / n,
        });
    }
    Ok(rows)
}

pub fn cmd_bench(args: &BenchArgs) -> Result<Vec<BenchRow>, CliError> {
    let (scenario, noise) = bench_source(args)?;
    let rows = run_bench(&scenario, noise, &args.nodes, args.repeats, args.sensors, args.seed)?;
    let dir = &args.out.out;
    create_dir(dir)?;
    let path = dir.join("bench.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Invalid(e.to_string()))?;
    let table = (|| -> csv::Result<()> {
        w.write_record([
            "nodes", "repeats", "mean_ms", "std_ms", "max_ms", "median_ms", "ee_error_mm", "tag",
        ])?;
        for r in &rows {
            w.write_record([
                r.nodes.to_string(),
                r.repeats.to_string(),
                r.mean_ms.to_string(),
                r.std_ms.to_string(),
                r.max_ms.to_string(),
                r.median_ms.to_string(),
                (r.ee_error * 1e3).to_string(),
                "measured".to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    })();
    table.map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    Ok(rows)
}

/// Runs one command and returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    let result = match &cli.command {
        Command::Simulate(args) => cmd_simulate(args).map(|files| {
            for f in files {
                println!("wrote {}", f.display());
            }
        }),
        Command::Estimate(args) => cmd_estimate(args).map(|r| {
            println!(
                "converged in {} iterations, cost {:e}, {:.3} ms",
                r.iterations.len(),
                r.final_cost,
                r.timing.total.as_secs_f64() * 1e3
            );
            if let Some(e) = r.end_effector_error() {
                println!("end-effector position error {:.3} mm", e * 1e3);
            }
            println!("wrote {}", args.out.out.display());
        }),
        Command::Check(args) => cmd_check(args).map(|lines| {
            for l in lines {
                println!("{l}");
            }
        }),
        Command::Bench(args) => cmd_bench(args).map(|rows| {
            println!("{:>6} {:>10} {:>10} {:>10} {:>12}", "nodes", "mean ms", "std ms", "max ms", "ee err mm");
            for r in rows {
                println!(
                    "{:>6} {:>10.3} {:>10.3} {:>10.3} {:>12.3}",
                    r.nodes,
                    r.mean_ms,
                    r.std_ms,
                    r.max_ms,
                    r.ee_error * 1e3
                );
            }
        }),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
