use cmrse::factors::fbg_model;
use cmrse::liegroup::log_se3;
use cmrse::model::{
    measurements_from_csv, measurements_to_csv, problem_from_config, problem_to_config, truth_from_csv, truth_to_csv,
    Endpoint, NoiseLevels, FULL_MASK,
};
use cmrse::sim::{builtin, generate, propagate_ground_truth, simulate_measurements, BuiltinOptions, BUILTIN_NAMES};

fn std_dev(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

#[test]
fn injected_noise_has_the_requested_spread() {
    let noise = NoiseLevels::default();
    let mut scenario = builtin("two_robot_ee", &BuiltinOptions { seed: 21, ..Default::default() }).unwrap();
    let target = Endpoint::RobotNode { robot: 0, node: 12 };
    scenario.sensors.pose = vec![(target, FULL_MASK); 10_000];
    scenario.sensors.fbg_robots = vec![0];
    let truth = propagate_ground_truth(&scenario).unwrap();
    let set = simulate_measurements(&truth, &scenario);

    let errors: Vec<_> = set.pose.iter().map(|m| log_se3(&(m.pose * truth.pose(&target).inverse()))).collect();
    for j in 0..6 {
        let sigma = if j < 3 { noise.position } else { noise.orientation };
        let column: Vec<f64> = errors.iter().map(|e| e[j]).collect();
        let s = std_dev(&column);
        assert!((s / sigma - 1.0).abs() < 0.05, "component {j}: {s} vs {sigma}");
    }

    let geometry = scenario.problem.topology.robots[0].fbg.unwrap();
    let mut fbg = Vec::new();
    for _ in 0..100 {
        scenario.seed += 1;
        for m in simulate_measurements(&truth, &scenario).fbg {
            let clean = fbg_model(&truth.robots[0][m.node].strain, &geometry);
            fbg.extend((m.strains - clean).iter().copied());
        }
    }
    assert!(fbg.len() >= 10_000);
    let s = std_dev(&fbg);
    assert!((s / noise.strain - 1.0).abs() < 0.05, "fbg: {s}");
}

#[test]
fn zero_noise_measurements_equal_the_model() {
    let options = BuiltinOptions {
        noise: NoiseLevels {
            position: 0.0,
            orientation: 0.0,
            strain: 0.0,
        },
        ..Default::default()
    };
    let data = generate(&builtin("delta", &options).unwrap()).unwrap();
    for m in &data.problem.measurements.pose {
        assert!(log_se3(&(m.pose * data.truth.pose(&m.target).inverse())).norm() < 1e-14);
    }
    let geometry = data.problem.topology.robots[0].fbg.unwrap();
    for m in &data.problem.measurements.fbg {
        assert_eq!(m.strains, fbg_model(&data.truth.robots[m.robot][m.node].strain, &geometry));
    }
}

#[test]
fn datasets_round_trip_through_files() {
    for name in BUILTIN_NAMES {
        let data = generate(&builtin(name, &BuiltinOptions { seed: 5, ..Default::default() }).unwrap()).unwrap();
        let mut problem = problem_from_config(&problem_to_config(&data.problem)).unwrap();
        problem.measurements =
            measurements_from_csv(&measurements_to_csv(&data.problem.measurements).unwrap(), &problem.topology).unwrap();
        assert_eq!(problem, data.problem, "{name}");
        let truth = truth_from_csv(&truth_to_csv(&data.truth), &problem.topology).unwrap();
        assert_eq!(truth, data.truth, "{name}");
    }
}

#[test]
fn same_seed_same_bytes() {
    let options = BuiltinOptions { seed: 99, ..Default::default() };
    let a = generate(&builtin("sensor_study", &options).unwrap()).unwrap();
    let b = generate(&builtin("sensor_study", &options).unwrap()).unwrap();
    assert_eq!(measurements_to_csv(&a.problem.measurements).unwrap(), measurements_to_csv(&b.problem.measurements).unwrap());
    assert_eq!(problem_to_config(&a.problem), problem_to_config(&b.problem));
    let c = generate(&builtin("sensor_study", &BuiltinOptions { seed: 100, ..options }).unwrap()).unwrap();
    assert_ne!(a.problem.measurements, c.problem.measurements);
}
