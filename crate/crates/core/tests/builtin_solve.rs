use cmrse::factors::coupling_residuals;
use cmrse::liegroup::log_se3;
use cmrse::model::{Endpoint, NoiseLevels, FULL_MASK};
use cmrse::sim::{builtin, generate, BuiltinOptions, BUILTIN_NAMES};
use cmrse::solver::{solve, SolveError};

fn quiet() -> BuiltinOptions {
    BuiltinOptions {
        noise: NoiseLevels {
            position: 0.0,
            orientation: 0.0,
            strain: 0.0,
        },
        ..Default::default()
    }
}

#[test]
fn prior_and_couplings_converge_quickly() {
    for name in BUILTIN_NAMES {
        // The spherical joints leave the platform free to roll about the line through them.
        if name == "two_robot_ee_spherical" {
            continue;
        }
        let scenario = builtin(name, &BuiltinOptions::default()).unwrap();
        let problem = scenario.problem;
        let est = solve(&problem).unwrap_or_else(|e| panic!("{name}: {e}"));
        let d = &est.diagnostics;
        let worst = coupling_residuals(&problem, &est.mean).unwrap().into_iter().fold(0.0, f64::max);
        assert!(d.converged, "{name} did not converge");
        assert!(d.iterations.len() < 10, "{name}: {} iterations", d.iterations.len());
        assert!(worst < 1e-4, "{name}: coupling residual {worst:e}");
    }
}

#[test]
fn spherical_platform_is_a_mechanism_without_measurements() {
    let scenario = builtin("two_robot_ee_spherical", &BuiltinOptions::default()).unwrap();
    assert!(matches!(solve(&scenario.problem), Err(SolveError::UnderConstrained { .. })));
}

#[test]
fn zero_noise_full_measurements_recover_truth() {
    for name in BUILTIN_NAMES {
        // Only constant-strain truths lie exactly on the prior's mean path.
        if name == "sensor_study" {
            continue;
        }
        let mut scenario = builtin(name, &quiet()).unwrap();
        let t = &scenario.problem.topology;
        let mut pose = Vec::new();
        for (robot, r) in t.robots.iter().enumerate() {
            for node in 0..r.node_count() {
                pose.push((Endpoint::RobotNode { robot, node }, FULL_MASK));
            }
        }
        for b in 0..t.bodies.len() {
            pose.push((Endpoint::Body(b), FULL_MASK));
        }
        scenario.sensors.pose = pose;
        scenario.sensors.fbg_robots = (0..t.robots.len()).collect();
        let data = generate(&scenario).unwrap();
        let est = solve(&data.problem).unwrap_or_else(|e| panic!("{name}: {e}"));
        let mut worst = (0.0f64, 0.0f64);
        for (r, nodes) in est.mean.robots.iter().enumerate() {
            for (k, n) in nodes.iter().enumerate() {
                let truth = &data.truth.robots[r][k].pose;
                worst.0 = worst.0.max((n.pose.origin() - truth.origin()).norm());
                let err = log_se3(&n.pose.compose(&truth.inverse()));
                worst.1 = worst.1.max(err.fixed_rows::<3>(3).norm());
            }
        }
        assert!(worst.0 < 1e-6 && worst.1 < 1e-6, "{name}: {worst:?}");
    }
}
