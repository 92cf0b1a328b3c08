//! Acceptance criteria, one verdict line each. Exits nonzero when any criterion fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use cmrse::factors::check::{run_jacobian_suite, CheckContext, CheckSettings};
use cmrse::factors::{coupling_residuals, evaluate_all};
use cmrse::liegroup::log_se3;
use cmrse::model::{BlockId, Endpoint, EstimationProblem, NoiseLevels, RodEnd, StateLayout, SystemState, FULL_MASK};
use cmrse::sim::{builtin, generate, BuiltinOptions, Dataset, BUILTIN_NAMES};
use cmrse::solver::{assemble, initial_state, order_blocks, scalar_mask, solve};
use cmrse_cli::report::RunReport;
use cmrse_cli::{run_bench, select_sensors, Sensors};

type Outcome = Result<String, String>;

fn dataset(name: &str, options: &BuiltinOptions) -> Dataset {
    generate(&builtin(name, options).expect("builtin scenario")).expect("simulation")
}

fn quiet() -> NoiseLevels {
    NoiseLevels {
        position: 0.0,
        orientation: 0.0,
        strain: 0.0,
    }
}

fn jacobians() -> Outcome {
    let start = Instant::now();
    let settings = CheckSettings::default();
    let report = run_jacobian_suite(&settings, &CheckContext::default());
    let secs = start.elapsed().as_secs_f64();
    let worst = report.results.iter().map(|r| r.max_relative_error).fold(0.0, f64::max);
    let fewest = report.results.iter().map(|r| r.evaluated).min().unwrap_or(0);
    let loci = report.loci.iter().filter(|l| l.passed).count();
    let line = format!(
        "{} families, min {fewest} states each, worst relative error {worst:.2e} (tol {:e}), {loci}/{} loci, {secs:.1} s",
        report.results.len(),
        settings.tolerance,
        report.loci.len()
    );
    if report.passed() && fewest >= 200 && secs < 30.0 {
        Ok(line)
    } else {
        Err(line)
    }
}

fn dense_normal_equations(
    problem: &EstimationProblem,
    state: &SystemState,
    layout: &StateLayout,
    mask: &[bool],
) -> (DMatrix<f64>, DVector<f64>) {
    let n = layout.total_dim();
    let mut h = DMatrix::zeros(n, n);
    let mut g = DVector::zeros(n);
    for f in evaluate_all(problem, state).expect("factors evaluate") {
        let mut j = DMatrix::zeros(f.error.len(), n);
        for (block, jac) in &f.jacobians {
            let o = layout.offset(layout.index_of(block));
            j.view_mut((0, o), (jac.nrows(), jac.ncols())).copy_from(jac);
        }
        h += j.transpose() * &f.information * &j;
        g -= j.transpose() * &f.information * &f.error;
    }
    for (i, &m) in mask.iter().enumerate() {
        if m {
            h.row_mut(i).fill(0.0);
            h.column_mut(i).fill(0.0);
            h[(i, i)] = 1.0;
            g[i] = 0.0;
        }
    }
    (h, g)
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

fn oracle() -> Outcome {
    let start = Instant::now();
    let options = BuiltinOptions {
        nodes: Some(9),
        seed: 3,
        ..Default::default()
    };
    let mut worst = 0.0f64;
    let mut checked = 0;
    for name in BUILTIN_NAMES {
        let problem = dataset(name, &options).problem;
        if problem.layout().len() > 60 {
            return Err(format!("{name} has more than 60 blocks"));
        }
        let symbolic = Arc::new(order_blocks(&problem, problem.hyper.solver.ordering));
        let mask = scalar_mask(&symbolic, &problem.fixed_mask());
        let state = initial_state(&problem);
        let (system, _) = assemble(&problem, &state, &symbolic, &mask).map_err(|e| format!("{name}: {e}"))?;
        let (h, g) = dense_normal_equations(&problem, &state, symbolic.layout(), &mask);
        worst = worst.max(rel(&system.to_dense(), &h));
        worst = worst.max((&system.rhs - &g).norm() / g.norm());
        let factor = system.factor().map_err(|e| format!("{name}: {e}"))?;
        let dense = h.cholesky().ok_or(format!("{name}: dense system not SPD"))?.solve(&g);
        worst = worst.max((factor.solve(&system.rhs) - &dense).norm() / dense.norm());

        let est = solve(&problem).map_err(|e| format!("{name}: {e}"))?;
        let symbolic = est.factor().symbolic().clone();
        let (h, _) = dense_normal_equations(&problem, &est.mean, symbolic.layout(), &mask);
        let mut inv = h.try_inverse().ok_or(format!("{name}: information not invertible"))?;
        for (i, &m) in mask.iter().enumerate() {
            if m {
                inv.row_mut(i).fill(0.0);
                inv.column_mut(i).fill(0.0);
            }
        }
        worst = worst.max(rel(&est.dense_covariance(), &inv));
        let layout = symbolic.layout();
        let blocks: Vec<BlockId> = layout.blocks().to_vec();
        for (b, cov) in blocks.iter().zip(est.covariances(&blocks)) {
            let o = layout.offset(layout.index_of(b));
            worst = worst.max(rel(&cov, &inv.view((o, o), (b.dim(), b.dim())).into_owned()));
        }
        checked += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    let line = format!("{checked} topologies, worst relative deviation {worst:.2e} (tol 1e-9), {secs:.1} s");
    if worst < 1e-9 && secs < 60.0 {
        Ok(line)
    } else {
        Err(line)
    }
}

fn exact_recovery() -> Outcome {
    let options = BuiltinOptions {
        noise: quiet(),
        ..Default::default()
    };
    let mut worst = (0.0f64, 0.0f64);
    let mut names = Vec::new();
    for name in BUILTIN_NAMES {
        // Its truth bends with varying curvature, which the constant-strain prior does not follow exactly.
        if name == "sensor_study" {
            continue;
        }
        let mut scenario = builtin(name, &options).expect("builtin scenario");
        let t = &scenario.problem.topology;
        let mut pose = Vec::new();
        for (robot, r) in t.robots.iter().enumerate() {
            pose.extend((0..r.node_count()).map(|node| (Endpoint::RobotNode { robot, node }, FULL_MASK)));
        }
        pose.extend((0..t.bodies.len()).map(|b| (Endpoint::Body(b), FULL_MASK)));
        scenario.sensors.pose = pose;
        scenario.sensors.fbg_robots = (0..t.robots.len()).collect();
        let data = generate(&scenario).expect("simulation");
        let est = solve(&data.problem).map_err(|e| format!("{name}: {e}"))?;
        for (r, nodes) in est.mean.robots.iter().enumerate() {
            for (k, n) in nodes.iter().enumerate() {
                let truth = &data.truth.robots[r][k].pose;
                worst.0 = worst.0.max((n.pose.origin() - truth.origin()).norm());
                worst.1 = worst.1.max(log_se3(&(n.pose * truth.inverse())).fixed_rows::<3>(3).norm());
            }
        }
        names.push(name);
    }
    let line = format!(
        "{} constant-strain topologies, worst node error {:.2e} m / {:.2e} rad (tol 1e-6)",
        names.len(),
        worst.0,
        worst.1
    );
    if worst.0 < 1e-6 && worst.1 < 1e-6 {
        Ok(line)
    } else {
        Err(line)
    }
}

fn topology_convergence() -> Outcome {
    let mut most = 0;
    let mut residual = 0.0f64;
    let mut failures = Vec::new();
    for name in BUILTIN_NAMES {
        // Without measurements the spherical platform is a mechanism and the solver reports it.
        if name == "two_robot_ee_spherical" {
            continue;
        }
        let problem = builtin(name, &BuiltinOptions::default()).expect("builtin scenario").problem;
        match solve(&problem) {
            Ok(est) => {
                let n = est.diagnostics.iterations.len();
                let r = coupling_residuals(&problem, &est.mean).expect("factors evaluate").into_iter().fold(0.0, f64::max);
                if !est.diagnostics.converged || n >= 10 || r >= 1e-4 {
                    failures.push(format!("{name} ({n} iterations, residual {r:.1e})"));
                }
                most = most.max(n);
                residual = residual.max(r);
            }
            Err(e) => failures.push(format!("{name}: {e}")),
        }
    }
    let line = format!("at most {most} iterations (< 10), worst weighted coupling residual {residual:.1e} (< 1e-4)");
    if failures.is_empty() {
        Ok(line)
    } else {
        Err(format!("{line}; failing: {}", failures.join(", ")))
    }
}

fn mean_ee_error(nodes: usize, sensors: Sensors, seeds: u64) -> Result<f64, String> {
    let rows = run_bench("sensor_study", NoiseLevels::default(), &[nodes], seeds as usize, sensors, 0)
        .map_err(|e| e.to_string())?;
    Ok(rows[0].ee_error)
}

fn sensor_study() -> Outcome {
    let both = mean_ee_error(25, Sensors::Both, 20)?;
    let fbg = [25, 13, 7]
        .into_iter()
        .map(|k| mean_ee_error(k, Sensors::Fbg, 20))
        .collect::<Result<Vec<_>, _>>()?;
    let monotone = fbg.windows(2).all(|w| w[1] > w[0]);
    let line = format!(
        "both, 25 nodes: {:.2} mm (< 6 mm); fbg only, 25/13/7 nodes: {:.2}/{:.2}/{:.2} mm",
        both * 1e3,
        fbg[0] * 1e3,
        fbg[1] * 1e3,
        fbg[2] * 1e3
    );
    if both < 6e-3 && monotone {
        Ok(line)
    } else {
        Err(line)
    }
}

fn coverage() -> Outcome {
    let (mut inside, mut total) = (0usize, 0usize);
    for seed in 0..50 {
        let data = dataset("sensor_study", &BuiltinOptions { seed, ..Default::default() });
        let est = solve(&data.problem).map_err(|e| format!("seed {seed}: {e}"))?;
        let report = RunReport::build(&data.problem, &est, None, None).map_err(|e| e.to_string())?;
        for row in &report.nodes {
            let truth = data.truth.robots[row.robot][row.node.expect("node row")].pose.origin();
            let d = row.position - truth;
            if (0..3).all(|i| d[i].abs() <= row.position_3sigma[i]) {
                inside += 1;
            }
            total += 1;
        }
    }
    let fraction = inside as f64 / total as f64;
    let line = format!("{inside}/{total} node positions inside 3σ ({:.1}%, need 90%)", 100.0 * fraction);
    if fraction >= 0.9 {
        Ok(line)
    } else {
        Err(line)
    }
}

fn coupling_studies() -> Outcome {
    let position_trace = |c: DMatrix<f64>| c[(0, 0)] + c[(1, 1)] + c[(2, 2)];
    let mut ratios = Vec::new();
    for s_c in [0.06, 0.12, 0.18] {
        let options = BuiltinOptions {
            coupling_arclength: Some(s_c),
            ..Default::default()
        };
        let coupled = builtin("tip_to_body", &options).expect("builtin scenario").problem;
        let mut uncoupled = coupled.clone();
        uncoupled.topology.couplings.clear();
        uncoupled.topology.robots[1].strain_boundary_nominal_ends.push(RodEnd::Distal);
        let spec = &coupled.topology.robots[0];
        let node = spec
            .node_arclengths
            .iter()
            .position(|&a| (a - s_c).abs() < 1e-12)
            .ok_or(format!("no node at {s_c}"))?;
        let block = BlockId::Node { robot: 0, node };
        let with = position_trace(solve(&coupled).map_err(|e| e.to_string())?.covariance(&block));
        let without = position_trace(solve(&uncoupled).map_err(|e| e.to_string())?.covariance(&block));
        ratios.push(with / without);
    }
    let orientation_trace = |name: &str| -> Result<f64, String> {
        let data = dataset(name, &BuiltinOptions { seed: 8, ..Default::default() });
        let c = solve(&data.problem).map_err(|e| format!("{name}: {e}"))?.covariance(&BlockId::Body(0));
        Ok(c[(3, 3)] + c[(4, 4)] + c[(5, 5)])
    };
    let rigid = orientation_trace("two_robot_ee")?;
    let spherical = orientation_trace("two_robot_ee_spherical")?;
    let line = format!(
        "coupled/uncoupled position trace at s_c = 0.06/0.12/0.18 m: {:.3}/{:.3}/{:.3}; platform orientation trace spherical {spherical:.2e} vs rigid {rigid:.2e}",
        ratios[0], ratios[1], ratios[2]
    );
    if ratios.iter().all(|&r| r < 1.0) && spherical > rigid {
        Ok(line)
    } else {
        Err(line)
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn performance() -> Outcome {
    // Node counts alternate per seed and each dataset keeps its fastest of three solves, so load
    // spikes on a shared machine hit both sizes alike.
    let mut times = [Vec::new(), Vec::new()];
    for seed in 0..21 {
        for (slot, nodes) in [13, 25].into_iter().enumerate() {
            let options = BuiltinOptions {
                nodes: Some(nodes),
                seed,
                ..Default::default()
            };
            let mut data = dataset("two_robot_ee", &options);
            select_sensors(&mut data.problem, Sensors::Both);
            let mut best = f64::INFINITY;
            for _ in 0..3 {
                let start = Instant::now();
                solve(&data.problem).map_err(|e| format!("{nodes} nodes, seed {seed}: {e}"))?;
                best = best.min(start.elapsed().as_secs_f64() * 1e3);
            }
            times[slot].push(best);
        }
    }
    let [k13, k25] = times.map(median);
    let ratio = k25 / k13;
    let line = format!("median solve {k13:.2} ms at 13 nodes (< 50 ms), {k25:.2} ms at 25 nodes, ratio {ratio:.2} (<= 3)");
    if k13 < 50.0 && ratio <= 3.0 {
        Ok(line)
    } else {
        Err(line)
    }
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_cmrse")).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("cmrse {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn same_files(a: &Path, b: &Path, names: &[&str]) -> Result<(), String> {
    for n in names {
        let read = |d: &Path| fs::read(d.join(n)).map_err(|e| format!("{}: {e}", d.join(n).display()));
        if read(a)? != read(b)? {
            return Err(format!("{n} differs between runs"));
        }
    }
    Ok(())
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut compared = 0;
    for name in BUILTIN_NAMES {
        let dirs: Vec<_> = ["a", "b"].iter().map(|t| tmp.path().join(format!("{name}_{t}"))).collect();
        for d in &dirs {
            let data = d.join("data");
            run_cli(&["simulate", "--scenario", name, "--seed", "17", "--out", data.to_str().unwrap()])?;
            run_cli(&[
                "estimate",
                "--config",
                data.join("config.toml").to_str().unwrap(),
                "--measurements",
                data.join("measurements.csv").to_str().unwrap(),
                "--truth",
                data.join("truth.csv").to_str().unwrap(),
                "--out",
                d.join("est").to_str().unwrap(),
            ])?;
        }
        let files = ["config.toml", "measurements.csv", "truth.csv"];
        same_files(&dirs[0].join("data"), &dirs[1].join("data"), &files)?;
        let tables = ["nodes.csv", "bodies.csv", "errors.csv", "iterations.csv"];
        same_files(&dirs[0].join("est"), &dirs[1].join("est"), &tables)?;
        compared += files.len() + tables.len();
    }

    let data = |seed| {
        let mut d = dataset("two_robot_ee", &BuiltinOptions { seed, ..Default::default() });
        select_sensors(&mut d.problem, Sensors::Both);
        d.problem.measurements
    };
    if data(4) != data(4) || data(4) == data(5) {
        return Err("in-process datasets do not follow the seed".into());
    }
    Ok(format!("{compared} files byte-identical across repeated runs of {} scenarios", BUILTIN_NAMES.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("jacobians match finite differences", jacobians),
        ("sparse solver matches dense oracles", oracle),
        ("exact recovery without noise", exact_recovery),
        ("prior and couplings converge", topology_convergence),
        ("sensor study end-effector error", sensor_study),
        ("3σ coverage", coverage),
        ("coupling studies", coupling_studies),
        ("solve time and scaling", performance),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("PASS {} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {} {name}: {detail}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
