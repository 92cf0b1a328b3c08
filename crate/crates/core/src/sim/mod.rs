//! Synthetic ground truth and sensor data.

mod builtin;

use nalgebra::{Vector3, Vector4, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::factors::{coupling_error, fbg_model};
use crate::liegroup::{curly6, exp_se3, Pose, Strain6, Twist};
use crate::model::{
    DofMask, Endpoint, EstimationProblem, FbgMeasurement, Hyperparameters, MeasurementSet, ModelError, NodeState,
    NoiseLevels, PoseMeasurement, SystemState,
};

pub use builtin::{builtin, BuiltinOptions, BUILTIN_NAMES};

/// Largest integration step for smoothly varying strain profiles, m.
pub const MAX_STEP: f64 = 1e-3;
/// Loop-closure tolerance a scenario must meet.
pub const CLOSURE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown scenario '{0}'")]
    UnknownScenario(String),
    #[error("coupling {coupling} does not close: residual {residual:e}")]
    InconsistentClosure { coupling: usize, residual: f64 },
    #[error("no ground-truth pose for {0}")]
    MissingTruth(String),
    #[error("target out of reach: {0}")]
    Unreachable(String),
    #[error("invalid scenario option: {0}")]
    InvalidOption(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Strain along a rod.
#[derive(Clone, Debug, PartialEq)]
pub enum StrainProfile {
    Constant(Strain6),
    /// `(end arclength, strain)` spans in ascending order; the last span extends to the tip.
    Piecewise(Vec<(f64, Strain6)>),
    /// `ε(s) = Σ cᵢ sⁱ`.
    Polynomial(Vec<Strain6>),
}

impl StrainProfile {
    /// Constant rotational strain with nominal translational strain.
    pub fn arc(omega: Vector3<f64>) -> Self {
        StrainProfile::Constant(Vector6::new(1.0, 0.0, 0.0, omega.x, omega.y, omega.z))
    }

    /// Rotational strain `ω₀ + s ω₁` with nominal translational strain.
    pub fn linear(omega0: Vector3<f64>, omega1: Vector3<f64>) -> Self {
        StrainProfile::Polynomial(vec![
            Vector6::new(1.0, 0.0, 0.0, omega0.x, omega0.y, omega0.z),
            Vector6::new(0.0, 0.0, 0.0, omega1.x, omega1.y, omega1.z),
        ])
    }

    pub fn eval(&self, s: f64) -> Strain6 {
        match self {
            StrainProfile::Constant(e) => *e,
            StrainProfile::Piecewise(spans) => spans
                .iter()
                .find(|(end, _)| s < *end)
                .or(spans.last())
                .map(|(_, e)| *e)
                .expect("piecewise profile has spans"),
            StrainProfile::Polynomial(c) => c.iter().rev().fold(Strain6::zeros(), |acc, ci| acc * s + ci),
        }
    }

    /// Arclengths where the strain is discontinuous.
    fn breakpoints(&self) -> Vec<f64> {
        match self {
            StrainProfile::Piecewise(spans) => spans.iter().map(|(end, _)| *end).collect(),
            _ => Vec::new(),
        }
    }
}

/// Node states along a rod from `base` (pose at arclength `arclengths[0]`).
///
/// Piecewise-constant profiles are integrated exactly; polynomial ones with a fourth-order
/// Magnus step no longer than [`MAX_STEP`].
pub fn propagate(base: &Pose, profile: &StrainProfile, arclengths: &[f64]) -> Vec<NodeState> {
    let mut pose = *base;
    let mut out = Vec::with_capacity(arclengths.len());
    out.push(NodeState {
        pose,
        strain: profile.eval(arclengths[0]),
    });
    let breaks = profile.breakpoints();
    for w in arclengths.windows(2) {
        let (a, b) = (w[0], w[1]);
        let mut cuts = vec![a];
        cuts.extend(breaks.iter().copied().filter(|&x| x > a && x < b));
        cuts.push(b);
        for c in cuts.windows(2) {
            pose = match profile {
                StrainProfile::Polynomial(_) => magnus(&pose, profile, c[0], c[1]),
                _ => exp_se3(&((c[1] - c[0]) * profile.eval(0.5 * (c[0] + c[1])))) * pose,
            };
        }
        out.push(NodeState {
            pose,
            strain: profile.eval(b),
        });
    }
    out
}

fn magnus(start: &Pose, profile: &StrainProfile, a: f64, b: f64) -> Pose {
    let steps = ((b - a) / MAX_STEP).ceil().max(1.0) as usize;
    let h = (b - a) / steps as f64;
    let offset = 3f64.sqrt() / 6.0;
    let mut pose = *start;
    for i in 0..steps {
        let s = a + i as f64 * h;
        let e1 = profile.eval(s + (0.5 - offset) * h);
        let e2 = profile.eval(s + (0.5 + offset) * h);
        let omega: Twist = 0.5 * h * (e1 + e2) - 3f64.sqrt() / 12.0 * h * h * curly6(&e1) * e2;
        pose = exp_se3(&omega) * pose;
    }
    pose.reorthonormalized()
}

/// Which measurements a scenario generates.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct SensorPlan {
    pub pose: Vec<(Endpoint, DofMask)>,
    /// Robots with FBG readings at every node.
    pub fbg_robots: Vec<usize>,
}

/// Ground-truth configuration plus everything needed to simulate its measurements.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthScenario {
    pub name: String,
    /// Topology, hyperparameters and boundary conditions; measurements are ignored.
    pub problem: EstimationProblem,
    pub profiles: Vec<StrainProfile>,
    /// True proximal pose of every robot.
    pub bases: Vec<Pose>,
    /// True pose of every rigid body; `None` places the body by loop closure.
    pub bodies: Vec<Option<Pose>>,
    pub sensors: SensorPlan,
    pub noise: NoiseLevels,
    pub seed: u64,
}

/// Estimation hyperparameters for a noise level; zero sigmas fall back to the defaults so the
/// covariances stay positive definite.
pub fn hyperparameters_for(noise: &NoiseLevels) -> Hyperparameters {
    let d = NoiseLevels::default();
    let pick = |v: f64, default: f64| if v > 0.0 { v } else { default };
    Hyperparameters::from_noise(&NoiseLevels {
        position: pick(noise.position, d.position),
        orientation: pick(noise.orientation, d.orientation),
        strain: pick(noise.strain, d.strain),
    })
}

/// True state of every node and body; fails if any coupling misses closure by more than
/// [`CLOSURE_TOLERANCE`] on its constrained rows.
pub fn propagate_ground_truth(scenario: &GroundTruthScenario) -> Result<SystemState, SimError> {
    let t = &scenario.problem.topology;
    let robots: Vec<Vec<NodeState>> = t
        .robots
        .iter()
        .enumerate()
        .map(|(r, spec)| propagate(&scenario.bases[r], &scenario.profiles[r], &spec.node_arclengths))
        .collect();
    let mut state = SystemState {
        robots,
        bodies: vec![Pose::identity(); t.bodies.len()],
    };
    let mut placed: Vec<bool> = vec![false; t.bodies.len()];
    for (b, pose) in scenario.bodies.iter().enumerate() {
        if let Some(p) = pose {
            state.bodies[b] = *p;
            placed[b] = true;
        }
    }
    let known = |e: &Endpoint, placed: &[bool]| match *e {
        Endpoint::RobotNode { .. } => true,
        Endpoint::Body(b) => placed[b],
    };
    loop {
        let mut progressed = false;
        for c in &t.couplings {
            let (target, pose) = match (c.a, c.b) {
                (Endpoint::Body(b), other) if !placed[b] && known(&other, &placed) => {
                    (b, c.offset_a * c.offset_b.inverse() * *state.pose(&other))
                }
                (other, Endpoint::Body(b)) if !placed[b] && known(&other, &placed) => {
                    (b, c.offset_b * c.offset_a.inverse() * *state.pose(&other))
                }
                _ => continue,
            };
            state.bodies[target] = pose.reorthonormalized();
            placed[target] = true;
            progressed = true;
        }
        if !progressed {
            break;
        }
    }
    if let Some(b) = placed.iter().position(|p| !p) {
        return Err(SimError::MissingTruth(format!("body:{b}")));
    }
    for (i, c) in t.couplings.iter().enumerate() {
        let e = coupling_error(state.pose(&c.a), state.pose(&c.b), &c.offset_a, &c.offset_b);
        let residual = (0..6).filter(|&j| c.dof_mask[j]).map(|j| e[j].abs()).fold(0.0, f64::max);
        if residual > CLOSURE_TOLERANCE {
            return Err(SimError::InconsistentClosure { coupling: i, residual });
        }
    }
    Ok(state)
}

/// Noisy measurements of `truth`: `T̃ = exp(n^) T` for poses, `ỹ = g(ε) + n` for FBG readings.
/// Deterministic for a given seed.
pub fn simulate_measurements(truth: &SystemState, scenario: &GroundTruthScenario) -> MeasurementSet {
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let noise = &scenario.noise;
    let normal = |sigma: f64| Normal::new(0.0, sigma).expect("non-negative sigma");
    let (np, no, ns) = (normal(noise.position), normal(noise.orientation), normal(noise.strain));
    let mut set = MeasurementSet::default();
    for (target, mask) in &scenario.sensors.pose {
        let mut n = Twist::zeros();
        for j in 0..3 {
            n[j] = np.sample(&mut rng);
        }
        for j in 3..6 {
            n[j] = no.sample(&mut rng);
        }
        set.pose.push(PoseMeasurement {
            target: *target,
            pose: (exp_se3(&n) * *truth.pose(target)).reorthonormalized(),
            mask: *mask,
            covariance: None,
        });
    }
    for &robot in &scenario.sensors.fbg_robots {
        let geometry = scenario.problem.topology.robots[robot]
            .fbg
            .expect("FBG sensing requires fiber geometry");
        for (node, state) in truth.robots[robot].iter().enumerate() {
            let y = fbg_model(&state.strain, &geometry);
            let n = Vector4::from_fn(|_, _| ns.sample(&mut rng));
            set.fbg.push(FbgMeasurement {
                robot,
                node,
                strains: y + n,
                mask: [true; 4],
                covariance: None,
            });
        }
    }
    set
}

/// A generated dataset: the estimation problem with simulated measurements, and its truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub problem: EstimationProblem,
    pub truth: SystemState,
}

pub fn generate(scenario: &GroundTruthScenario) -> Result<Dataset, SimError> {
    let truth = propagate_ground_truth(scenario)?;
    let mut problem = scenario.problem.clone();
    problem.measurements = simulate_measurements(&truth, scenario);
    problem.metadata.insert("scenario".into(), scenario.name.clone());
    problem.metadata.insert("seed".into(), scenario.seed.to_string());
    problem.metadata.insert("sigma_position".into(), scenario.noise.position.to_string());
    problem.metadata.insert("sigma_orientation".into(), scenario.noise.orientation.to_string());
    problem.metadata.insert("sigma_strain".into(), scenario.noise.strain.to_string());
    Ok(Dataset { problem, truth })
}
