use std::collections::BTreeSet;

use cmrse::liegroup::Pose;
use cmrse::model::{
    CouplingJoint, Endpoint, EstimationProblem, Hyperparameters, MeasurementSet, OrderingStrategy, RigidBody,
    RobotSpec, SystemTopology, FULL_MASK,
};
use cmrse::solver::{order_blocks, symbolic_for};
use nalgebra::Matrix6;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn coupling(a: Endpoint, b: Endpoint) -> CouplingJoint {
    CouplingJoint {
        a,
        b,
        offset_a: Pose::identity(),
        offset_b: Pose::identity(),
        dof_mask: FULL_MASK,
        covariance: Matrix6::identity() * 2e-6,
    }
}

fn problem(topology: SystemTopology) -> EstimationProblem {
    EstimationProblem::new(topology, Hyperparameters::default(), MeasurementSet::default())
}

fn fill(p: &EstimationProblem, strategy: OrderingStrategy) -> BTreeSet<(usize, usize)> {
    order_blocks(p, strategy).fill_blocks().into_iter().collect()
}

#[test]
fn tip_coupled_to_body_fills_the_rest_of_the_first_robot() {
    // Five nodes per robot; the tip of the second robot meets node 2 of the first.
    let topology = SystemTopology {
        robots: vec![
            RobotSpec::uniform("a", 0.24, 5, Pose::identity()),
            RobotSpec::uniform("b", 0.24, 5, Pose::identity()),
        ],
        bodies: Vec::new(),
        couplings: vec![coupling(
            Endpoint::RobotNode { robot: 0, node: 2 },
            Endpoint::RobotNode { robot: 1, node: 4 },
        )],
    };
    let expected: BTreeSet<(usize, usize)> = (5..10).map(|c| (18, c)).collect();
    assert_eq!(fill(&problem(topology), OrderingStrategy::RobotsSequential), expected);
}

#[test]
fn common_end_effector_fills_two_strain_blocks() {
    let topology = SystemTopology {
        robots: vec![
            RobotSpec::uniform("a", 0.24, 5, Pose::identity()),
            RobotSpec::uniform("b", 0.24, 5, Pose::identity()),
        ],
        bodies: vec![RigidBody {
            name: "ee".into(),
            initial_pose: None,
            fixed: false,
        }],
        couplings: vec![
            coupling(Endpoint::RobotNode { robot: 0, node: 4 }, Endpoint::Body(0)),
            coupling(Endpoint::RobotNode { robot: 1, node: 4 }, Endpoint::Body(0)),
        ],
    };
    let p = problem(topology);
    let expected: BTreeSet<(usize, usize)> = [(20, 9), (20, 19)].into_iter().collect();
    assert_eq!(fill(&p, OrderingStrategy::RobotsSequential), expected);
    let sym = symbolic_for(&p, p.layout());
    let coupled: Vec<usize> = sym.system_rows(8).iter().copied().collect();
    assert_eq!(coupled, vec![9, 20]);
}

fn random_topology(rng: &mut ChaCha8Rng) -> SystemTopology {
    let n_robots = rng.random_range(1..5);
    let robots: Vec<RobotSpec> = (0..n_robots)
        .map(|i| RobotSpec::uniform(format!("r{i}"), 0.24, rng.random_range(2..9), Pose::identity()))
        .collect();
    let n_bodies = rng.random_range(0..3);
    let bodies: Vec<RigidBody> = (0..n_bodies)
        .map(|i| RigidBody {
            name: format!("b{i}"),
            initial_pose: None,
            fixed: false,
        })
        .collect();
    let endpoint = |rng: &mut ChaCha8Rng| {
        if n_bodies > 0 && rng.random_bool(0.3) {
            Endpoint::Body(rng.random_range(0..n_bodies))
        } else {
            let robot = rng.random_range(0..n_robots);
            Endpoint::RobotNode {
                robot,
                node: rng.random_range(0..robots[robot].node_count()),
            }
        }
    };
    let mut couplings = Vec::new();
    for _ in 0..rng.random_range(0..6) {
        let (a, b) = (endpoint(rng), endpoint(rng));
        if a != b {
            couplings.push(coupling(a, b));
        }
    }
    SystemTopology {
        robots,
        bodies,
        couplings,
    }
}

#[test]
fn minimum_degree_never_predicts_more_fill() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..50 {
        let p = problem(random_topology(&mut rng));
        let natural = order_blocks(&p, OrderingStrategy::RobotsSequential).fill_count();
        let md = order_blocks(&p, OrderingStrategy::MinimumDegree).fill_count();
        assert!(md <= natural, "{md} > {natural}");
    }
}

#[test]
fn chain_has_no_fill_under_natural_order() {
    let topology = SystemTopology {
        robots: vec![RobotSpec::uniform("a", 0.24, 13, Pose::identity())],
        ..Default::default()
    };
    assert!(fill(&problem(topology), OrderingStrategy::RobotsSequential).is_empty());
}
