//! Topology, hyperparameters, measurements and the estimation problem that ties them together.
//!
//! Units are SI throughout: meters, radians and unitless strain. Covariances use the same units.

mod config;
mod layout;
mod measurements;
mod validate;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix4, Matrix6, Vector4};
use thiserror::Error;

use crate::liegroup::{nominal_strain, Pose, Strain6};

pub use config::{problem_from_config, problem_to_config};
pub use layout::{BlockId, StateLayout};
pub use measurements::{
    measurements_from_csv, measurements_to_csv, truth_from_csv, truth_to_csv,
};
pub use validate::{unanchored_blocks, validate_topology, Diagnostic, DiagnosticKind, Diagnostics};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("{location}: {message}")]
    Schema { location: String, message: String },
    #[error("unknown reference {reference} ({location})")]
    UnknownReference { location: String, reference: String },
    #[error("{location}: covariance is not symmetric positive definite")]
    NotSpd { location: String },
    #[error("duplicate measurement: {0}")]
    DuplicateMeasurement(String),
}

impl ModelError {
    pub(crate) fn schema(location: impl Into<String>, message: impl Into<String>) -> Self {
        ModelError::Schema {
            location: location.into(),
            message: message.into(),
        }
    }
}

/// One end of a continuum robot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RodEnd {
    Proximal,
    Distal,
}

impl RodEnd {
    pub fn as_str(&self) -> &'static str {
        match self {
            RodEnd::Proximal => "proximal",
            RodEnd::Distal => "distal",
        }
    }
}

/// Multi-core FBG fiber: one central core plus three outer cores at `core_radius`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FbgGeometry {
    pub core_radius: f64,
    /// Angles of the three outer cores about the rod x-axis, measured from the body y-axis.
    pub core_angles: [f64; 3],
}

impl FbgGeometry {
    /// Outer cores spaced 120° apart.
    pub fn symmetric(core_radius: f64) -> Self {
        use std::f64::consts::PI;
        Self {
            core_radius,
            core_angles: [0.0, 2.0 * PI / 3.0, 4.0 * PI / 3.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobotSpec {
    pub name: String,
    pub length: f64,
    /// Ascending arclengths, first 0 and last `length`.
    pub node_arclengths: Vec<f64>,
    /// Pose of the proximal node; held fixed when `fixed_base` is set, otherwise an initial guess.
    pub base_pose: Pose,
    pub fixed_base: bool,
    pub fbg: Option<FbgGeometry>,
    /// Holds every translational strain at `[1, 0, 0]`.
    pub kirchhoff_lock: bool,
    /// Ends whose strain is held at the nominal value.
    pub strain_boundary_nominal_ends: Vec<RodEnd>,
    /// Multiplier on the prior power-spectral density for this robot.
    pub prior_psd_scale: f64,
}

impl RobotSpec {
    /// A fixed-base robot with `node_count` uniformly spaced nodes.
    pub fn uniform(name: impl Into<String>, length: f64, node_count: usize, base_pose: Pose) -> Self {
        Self {
            name: name.into(),
            length,
            node_arclengths: uniform_arclengths(length, node_count),
            base_pose,
            fixed_base: true,
            fbg: None,
            kirchhoff_lock: false,
            strain_boundary_nominal_ends: Vec::new(),
            prior_psd_scale: 1.0,
        }
    }

    pub fn node_count(&self) -> usize {
        self.node_arclengths.len()
    }

    pub fn tip(&self) -> usize {
        self.node_arclengths.len() - 1
    }
}

pub fn uniform_arclengths(length: f64, node_count: usize) -> Vec<f64> {
    let n = node_count.max(2);
    (0..n)
        .map(|k| {
            if k == n - 1 {
                length
            } else {
                length * k as f64 / (n - 1) as f64
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RigidBody {
    pub name: String,
    pub initial_pose: Option<Pose>,
    /// A fixed body acts as a known frame (e.g. the world).
    pub fixed: bool,
}

/// A pose-carrying element of the state: a robot node or a rigid body.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Endpoint {
    RobotNode { robot: usize, node: usize },
    Body(usize),
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::RobotNode { robot, node } => write!(f, "robot:{robot}:{node}"),
            Endpoint::Body(b) => write!(f, "body:{b}"),
        }
    }
}

/// Node selector before it is resolved against a topology.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NodeRef {
    Index(usize),
    Base,
    Tip,
    Arclength(f64),
}

/// Unresolved endpoint as written in files: `robot:<i>:<node|base|tip|@s>` or `body:<i>`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EndpointRef {
    Robot { robot: usize, node: NodeRef },
    Body(usize),
}

impl FromStr for EndpointRef {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let bad = || format!("malformed endpoint `{s}` (expected robot:<i>:<node> or body:<i>)");
        match parts.as_slice() {
            ["robot", r, n] => {
                let robot = r.parse().map_err(|_| bad())?;
                let node = match *n {
                    "base" => NodeRef::Base,
                    "tip" => NodeRef::Tip,
                    _ if n.starts_with('@') => {
                        NodeRef::Arclength(n[1..].parse().map_err(|_| bad())?)
                    }
                    _ => NodeRef::Index(n.parse().map_err(|_| bad())?),
                };
                Ok(EndpointRef::Robot { robot, node })
            }
            ["body", b] => Ok(EndpointRef::Body(b.parse().map_err(|_| bad())?)),
            _ => Err(bad()),
        }
    }
}

impl EndpointRef {
    pub fn resolve(&self, topology: &SystemTopology, location: &str) -> Result<Endpoint, ModelError> {
        let unknown = |reference: String| ModelError::UnknownReference {
            location: location.to_string(),
            reference,
        };
        match *self {
            EndpointRef::Body(b) => {
                if b < topology.bodies.len() {
                    Ok(Endpoint::Body(b))
                } else {
                    Err(unknown(format!("body:{b}")))
                }
            }
            EndpointRef::Robot { robot, node } => {
                let spec = topology
                    .robots
                    .get(robot)
                    .ok_or_else(|| unknown(format!("robot:{robot}")))?;
                let index = match node {
                    NodeRef::Base => 0,
                    NodeRef::Tip => spec.tip(),
                    NodeRef::Index(i) => i,
                    NodeRef::Arclength(s) => spec
                        .node_arclengths
                        .iter()
                        .position(|&a| (a - s).abs() <= 1e-9 * spec.length.max(1.0))
                        .ok_or_else(|| unknown(format!("robot:{robot}:@{s} (no node at that arclength)")))?,
                };
                if index >= spec.node_count() {
                    return Err(unknown(format!("robot:{robot}:{index}")));
                }
                Ok(Endpoint::RobotNode { robot, node: index })
            }
        }
    }
}

/// Which of the six error components a joint or measurement constrains.
pub type DofMask = [bool; 6];

pub const FULL_MASK: DofMask = [true; 6];
/// Position rows only: a spherical joint or a position sensor.
pub const POSITION_MASK: DofMask = [true, true, true, false, false, false];

#[derive(Clone, Debug, PartialEq)]
pub struct CouplingJoint {
    pub a: Endpoint,
    pub b: Endpoint,
    /// Joint frame relative to the body frame of `a` (`T_{c1 g}`).
    pub offset_a: Pose,
    /// Joint frame relative to the body frame of `b` (`T_{c2 g}`).
    pub offset_b: Pose,
    pub dof_mask: DofMask,
    /// `R_{c,g}`; rows and columns outside `dof_mask` are ignored.
    pub covariance: Matrix6<f64>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct SystemTopology {
    pub robots: Vec<RobotSpec>,
    pub bodies: Vec<RigidBody>,
    pub couplings: Vec<CouplingJoint>,
}

impl SystemTopology {
    pub fn contains(&self, e: &Endpoint) -> bool {
        match *e {
            Endpoint::RobotNode { robot, node } => {
                self.robots.get(robot).is_some_and(|r| node < r.node_count())
            }
            Endpoint::Body(b) => b < self.bodies.len(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum OrderingStrategy {
    /// Robots in declaration order, nodes by arclength, rigid bodies last.
    #[default]
    RobotsSequential,
    /// Greedy minimum-degree elimination order; never worse than the sequential order.
    MinimumDegree,
}

/// Linearization of the strain row of the prior error.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PriorJacobianMode {
    /// Exact derivative of `J(ξ)⁻¹ ε` with respect to `ξ`.
    #[default]
    Exact,
    /// First-order form `½ ε⋏ J⁻¹`, accurate only for small `ξ`.
    FirstOrder,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineSearchSettings {
    pub initial_step: f64,
    pub shrink: f64,
    pub armijo: f64,
    pub min_step: f64,
}

impl Default for LineSearchSettings {
    fn default() -> Self {
        Self {
            initial_step: 1.0,
            shrink: 0.5,
            armijo: 1e-4,
            min_step: 1e-6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverSettings {
    pub max_iters: usize,
    /// Converged when the infinity norm of the Gauss-Newton step drops below this.
    pub convergence_norm: f64,
    pub line_search: LineSearchSettings,
    pub ordering: OrderingStrategy,
    pub prior_jacobian: PriorJacobianMode,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iters: 100,
            convergence_norm: 1e-6,
            line_search: LineSearchSettings::default(),
            ordering: OrderingStrategy::default(),
            prior_jacobian: PriorJacobianMode::default(),
        }
    }
}

/// Standard deviations used to derive the default measurement covariances.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseLevels {
    /// Position noise, m.
    pub position: f64,
    /// Orientation noise, rad.
    pub orientation: f64,
    /// FBG longitudinal strain noise, unitless.
    pub strain: f64,
}

impl Default for NoiseLevels {
    fn default() -> Self {
        Self {
            position: 2e-3,
            orientation: 0.05,
            strain: 10e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hyperparameters {
    /// Power-spectral density of the white-noise prior.
    pub qc: Matrix6<f64>,
    pub r_pose_robot: Matrix6<f64>,
    pub r_pose_body: Matrix6<f64>,
    pub r_fbg: Matrix4<f64>,
    pub r_coupling: Matrix6<f64>,
    pub solver: SolverSettings,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self::from_noise(&NoiseLevels::default())
    }
}

impl Hyperparameters {
    /// Evaluation defaults: `R_pose = 2 diag(σp², σp², σp², σo², σo², σo²)`,
    /// `R_fbg = 40 σs² I`, `R_c = 2e-6 I`, `Q_c = 2 diag(0.01 ×3, 1000 ×3)`.
    pub fn from_noise(noise: &NoiseLevels) -> Self {
        let p2 = noise.position * noise.position;
        let o2 = noise.orientation * noise.orientation;
        let r_pose = Matrix6::from_diagonal(&(2.0 * nalgebra::Vector6::new(p2, p2, p2, o2, o2, o2)));
        Self {
            qc: Matrix6::from_diagonal(&(2.0 * nalgebra::Vector6::new(0.01, 0.01, 0.01, 1000.0, 1000.0, 1000.0))),
            r_pose_robot: r_pose,
            r_pose_body: r_pose,
            r_fbg: Matrix4::from_diagonal(&Vector4::repeat(40.0 * noise.strain * noise.strain)),
            r_coupling: Matrix6::from_diagonal(&nalgebra::Vector6::repeat(2e-6)),
            solver: SolverSettings::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseMeasurement {
    pub target: Endpoint,
    pub pose: Pose,
    pub mask: DofMask,
    /// Per-record covariance; falls back to the hyperparameter default for the target kind.
    pub covariance: Option<Matrix6<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FbgMeasurement {
    pub robot: usize,
    pub node: usize,
    /// Longitudinal strains of the central core and the three outer cores.
    pub strains: Vector4<f64>,
    pub mask: [bool; 4],
    pub covariance: Option<Matrix4<f64>>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct MeasurementSet {
    pub pose: Vec<PoseMeasurement>,
    pub fbg: Vec<FbgMeasurement>,
}

impl MeasurementSet {
    pub fn is_empty(&self) -> bool {
        self.pose.is_empty() && self.fbg.is_empty()
    }
}

/// Holds selected state entries at their initial values during optimization.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryCondition {
    pub target: Endpoint,
    pub pose_mask: DofMask,
    /// Ignored for rigid bodies.
    pub strain_mask: DofMask,
    /// Value the masked strain entries are held at; defaults to the nominal strain.
    pub strain_value: Option<Strain6>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct EstimationProblem {
    pub topology: SystemTopology,
    pub hyper: Hyperparameters,
    pub measurements: MeasurementSet,
    pub boundary_conditions: Vec<BoundaryCondition>,
    /// Free-form provenance (scenario name, seed, ...), carried through files untouched.
    pub metadata: BTreeMap<String, String>,
}

/// Per-node mask of state entries that stay fixed: 12 entries for robot nodes
/// (`[pose; strain]`), 6 for rigid bodies.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedMask {
    pub robots: Vec<Vec<[bool; 12]>>,
    pub bodies: Vec<[bool; 6]>,
    /// Values that fixed strain entries are held at (nominal unless overridden).
    pub strain_values: Vec<Vec<Strain6>>,
}

impl FixedMask {
    pub fn entries(&self, block: &BlockId) -> &[bool] {
        match *block {
            BlockId::Node { robot, node } => &self.robots[robot][node],
            BlockId::Body(b) => &self.bodies[b],
        }
    }
}

impl EstimationProblem {
    pub fn new(topology: SystemTopology, hyper: Hyperparameters, measurements: MeasurementSet) -> Self {
        Self {
            topology,
            hyper,
            measurements,
            boundary_conditions: Vec::new(),
            metadata: BTreeMap::new(),
        }
    }

    /// Parses a TOML config and a measurement CSV and validates references and covariances.
    pub fn load(config_text: &str, measurement_text: &str) -> Result<Self, ModelError> {
        let mut problem = problem_from_config(config_text)?;
        problem.measurements = measurements_from_csv(measurement_text, &problem.topology)?;
        problem.check_structure()?;
        Ok(problem)
    }

    /// Structural checks that make a problem unusable (as opposed to diagnostics).
    pub fn check_structure(&self) -> Result<(), ModelError> {
        let diagnostics = validate_topology(self);
        match diagnostics.first_structural_error() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    pub fn layout(&self) -> StateLayout {
        StateLayout::new(&self.topology)
    }

    pub fn pose_covariance(&self, m: &PoseMeasurement) -> Matrix6<f64> {
        m.covariance.unwrap_or(match m.target {
            Endpoint::RobotNode { .. } => self.hyper.r_pose_robot,
            Endpoint::Body(_) => self.hyper.r_pose_body,
        })
    }

    pub fn fbg_covariance(&self, m: &FbgMeasurement) -> Matrix4<f64> {
        m.covariance.unwrap_or(self.hyper.r_fbg)
    }

    /// Prior power-spectral density of one robot.
    pub fn robot_qc(&self, robot: usize) -> Matrix6<f64> {
        self.hyper.qc * self.topology.robots[robot].prior_psd_scale
    }

    /// Collects every boundary condition (fixed bases, Kirchhoff locks, nominal ends,
    /// fixed bodies and explicit entries) into one mask.
    pub fn fixed_mask(&self) -> FixedMask {
        let mut robots: Vec<Vec<[bool; 12]>> = self
            .topology
            .robots
            .iter()
            .map(|r| vec![[false; 12]; r.node_count()])
            .collect();
        let mut strain_values: Vec<Vec<Strain6>> = self
            .topology
            .robots
            .iter()
            .map(|r| vec![nominal_strain(); r.node_count()])
            .collect();
        for (i, spec) in self.topology.robots.iter().enumerate() {
            if spec.fixed_base {
                robots[i][0][..6].fill(true);
            }
            if spec.kirchhoff_lock {
                for node in robots[i].iter_mut() {
                    node[6..9].fill(true);
                }
            }
            for end in &spec.strain_boundary_nominal_ends {
                let k = match end {
                    RodEnd::Proximal => 0,
                    RodEnd::Distal => spec.tip(),
                };
                robots[i][k][6..].fill(true);
            }
        }
        let mut bodies: Vec<[bool; 6]> = self
            .topology
            .bodies
            .iter()
            .map(|b| [b.fixed; 6])
            .collect();
        for bc in &self.boundary_conditions {
            match bc.target {
                Endpoint::RobotNode { robot, node } => {
                    for j in 0..6 {
                        robots[robot][node][j] |= bc.pose_mask[j];
                        if bc.strain_mask[j] {
                            robots[robot][node][6 + j] = true;
                            if let Some(v) = bc.strain_value {
                                strain_values[robot][node][j] = v[j];
                            }
                        }
                    }
                }
                Endpoint::Body(b) => {
                    for j in 0..6 {
                        bodies[b][j] |= bc.pose_mask[j];
                    }
                }
            }
        }
        FixedMask {
            robots,
            bodies,
            strain_values,
        }
    }
}

/// State of one robot node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NodeState {
    pub pose: Pose,
    pub strain: Strain6,
}

/// Discrete system state: robot nodes plus rigid-body poses.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct SystemState {
    pub robots: Vec<Vec<NodeState>>,
    pub bodies: Vec<Pose>,
}

impl SystemState {
    pub fn pose(&self, e: &Endpoint) -> &Pose {
        match *e {
            Endpoint::RobotNode { robot, node } => &self.robots[robot][node].pose,
            Endpoint::Body(b) => &self.bodies[b],
        }
    }

    pub fn pose_mut(&mut self, e: &Endpoint) -> &mut Pose {
        match *e {
            Endpoint::RobotNode { robot, node } => &mut self.robots[robot][node].pose,
            Endpoint::Body(b) => &mut self.bodies[b],
        }
    }
}

/// True when `m` restricted to the rows/columns in `mask` admits a Cholesky factorization.
pub(crate) fn is_spd_on<const D: usize>(m: &nalgebra::SMatrix<f64, D, D>, mask: &[bool]) -> bool {
    let idx: Vec<usize> = (0..D).filter(|&i| mask[i]).collect();
    if idx.is_empty() {
        return true;
    }
    let sub = nalgebra::DMatrix::from_fn(idx.len(), idx.len(), |r, c| m[(idx[r], idx[c])]);
    if (&sub - sub.transpose()).amax() > 1e-12 * sub.amax().max(1e-300) {
        return false;
    }
    sub.iter().all(|v| v.is_finite()) && sub.cholesky().is_some()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoint_parsing() {
        assert_eq!(
            "robot:1:tip".parse::<EndpointRef>().unwrap(),
            EndpointRef::Robot { robot: 1, node: NodeRef::Tip }
        );
        assert_eq!("body:0".parse::<EndpointRef>().unwrap(), EndpointRef::Body(0));
        assert_eq!(
            "robot:0:@0.12".parse::<EndpointRef>().unwrap(),
            EndpointRef::Robot { robot: 0, node: NodeRef::Arclength(0.12) }
        );
        assert!("robot:x:1".parse::<EndpointRef>().is_err());
        assert!("link:0".parse::<EndpointRef>().is_err());
    }

    #[test]
    fn endpoint_resolution() {
        let topology = SystemTopology {
            robots: vec![RobotSpec::uniform("a", 0.24, 25, Pose::identity())],
            bodies: vec![],
            couplings: vec![],
        };
        let tip = EndpointRef::Robot { robot: 0, node: NodeRef::Tip };
        assert_eq!(tip.resolve(&topology, "t").unwrap(), Endpoint::RobotNode { robot: 0, node: 24 });
        let at = EndpointRef::Robot { robot: 0, node: NodeRef::Arclength(0.12) };
        assert_eq!(at.resolve(&topology, "t").unwrap(), Endpoint::RobotNode { robot: 0, node: 12 });
        assert!(EndpointRef::Body(0).resolve(&topology, "t").is_err());
        assert!(EndpointRef::Robot { robot: 0, node: NodeRef::Index(25) }
            .resolve(&topology, "t")
            .is_err());
    }

    #[test]
    fn default_hyperparameters() {
        let h = Hyperparameters::default();
        assert!((h.r_pose_robot[(0, 0)] - 8e-6).abs() < 1e-18);
        assert!((h.r_pose_robot[(3, 3)] - 5e-3).abs() < 1e-15);
        assert!((h.r_fbg[(0, 0)] - 4e-9).abs() < 1e-21);
        assert_eq!(h.r_coupling[(5, 5)], 2e-6);
        assert_eq!(h.qc[(0, 0)], 0.02);
        assert_eq!(h.qc[(5, 5)], 2000.0);
    }

    #[test]
    fn fixed_mask_collects_conditions() {
        let mut robot = RobotSpec::uniform("a", 0.1, 3, Pose::identity());
        robot.kirchhoff_lock = true;
        robot.strain_boundary_nominal_ends = vec![RodEnd::Distal];
        let mut problem = EstimationProblem::new(
            SystemTopology {
                robots: vec![robot],
                bodies: vec![RigidBody { name: "w".into(), initial_pose: None, fixed: true }],
                couplings: vec![],
            },
            Hyperparameters::default(),
            MeasurementSet::default(),
        );
        problem.boundary_conditions.push(BoundaryCondition {
            target: Endpoint::RobotNode { robot: 0, node: 1 },
            pose_mask: [false; 6],
            strain_mask: [false, false, false, true, false, false],
            strain_value: Some(Strain6::new(1.0, 0.0, 0.0, 0.5, 0.0, 0.0)),
        });
        let mask = problem.fixed_mask();
        assert_eq!(&mask.robots[0][0][..9], &[true; 9]);
        assert_eq!(&mask.robots[0][0][9..], &[false; 3]);
        assert_eq!(mask.robots[0][1], [false, false, false, false, false, false, true, true, true, true, false, false]);
        assert_eq!(mask.robots[0][2][6..], [true; 6]);
        assert_eq!(mask.bodies[0], [true; 6]);
        assert_eq!(mask.strain_values[0][1][3], 0.5);
    }
}
