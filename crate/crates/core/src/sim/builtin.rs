//! Named scenarios: constant-curvature truths whose coupling offsets close exactly.

use nalgebra::{Matrix3, Matrix6, Rotation3, Vector3, Vector6};

use super::{hyperparameters_for, propagate, GroundTruthScenario, SensorPlan, SimError, StrainProfile};
use crate::liegroup::Pose;
use crate::model::{
    CouplingJoint, DofMask, Endpoint, EstimationProblem, FbgGeometry, MeasurementSet, NoiseLevels,
    RigidBody, RobotSpec, RodEnd, SystemTopology, FULL_MASK, POSITION_MASK,
};

pub const BUILTIN_NAMES: [&str; 8] = [
    "two_robot_ee",
    "two_robot_ee_spherical",
    "tip_to_body",
    "reconfigurable_parallel",
    "stewart_gough",
    "delta",
    "extended",
    "sensor_study",
];

/// Reference robot length, m.
const LENGTH: f64 = 0.24;
const FBG_RADIUS: f64 = 35e-6;
const TORSION_FREE: DofMask = [true, true, true, false, true, true];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BuiltinOptions {
    /// Nodes on a 240 mm robot; other lengths keep the same spacing.
    pub nodes: Option<usize>,
    pub noise: NoiseLevels,
    pub seed: u64,
    /// Coupling arclength on the first robot of `tip_to_body`, m.
    pub coupling_arclength: Option<f64>,
}

pub fn builtin(name: &str, options: &BuiltinOptions) -> Result<GroundTruthScenario, SimError> {
    if options.nodes.is_some_and(|k| k < 2) {
        return Err(SimError::InvalidOption("at least two nodes per robot".into()));
    }
    match name {
        "two_robot_ee" => two_robot_ee(options, false),
        "two_robot_ee_spherical" => two_robot_ee(options, true),
        "tip_to_body" => tip_to_body(options),
        "reconfigurable_parallel" => reconfigurable_parallel(options),
        "stewart_gough" => stewart_gough(options),
        "delta" => delta(options),
        "extended" => extended(options),
        "sensor_study" => sensor_study(options),
        other => Err(SimError::UnknownScenario(other.to_string())),
    }
}

fn rot(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).into_inner()
}

/// Orientation of a rod frame that grows along inertial `+z`, rotated by `yaw` about `z`.
fn up(yaw: f64) -> Matrix3<f64> {
    rot(Vector3::z(), yaw) * Matrix3::from_columns(&[-Vector3::z(), Vector3::y(), Vector3::x()])
}

/// Rod frame growing along `direction`.
fn pointing(direction: &Vector3<f64>) -> Matrix3<f64> {
    let x = -direction.normalize();
    let helper = if x.z.abs() < 0.9 { Vector3::z() } else { Vector3::x() };
    let y = helper.cross(&x).normalize();
    Matrix3::from_columns(&[x, y, x.cross(&y)])
}

fn frame(rotation: &Matrix3<f64>, origin: Vector3<f64>) -> Pose {
    Pose::from_frame(rotation, &origin).expect("rotation matrices are orthonormal")
}

struct Builder {
    name: String,
    options: BuiltinOptions,
    topology: SystemTopology,
    profiles: Vec<StrainProfile>,
    bases: Vec<Pose>,
    bodies: Vec<Option<Pose>>,
    sensors: SensorPlan,
}

impl Builder {
    fn new(name: &str, options: &BuiltinOptions) -> Self {
        Self {
            name: name.to_string(),
            options: options.clone(),
            topology: SystemTopology::default(),
            profiles: Vec::new(),
            bases: Vec::new(),
            bodies: Vec::new(),
            sensors: SensorPlan::default(),
        }
    }

    fn node_count(&self, length: f64, default: usize) -> usize {
        match self.options.nodes {
            None => default,
            Some(k) => {
                let ds = LENGTH / (k - 1) as f64;
                ((length / ds).round() as usize + 1).max(2)
            }
        }
    }

    fn robot(&mut self, name: &str, length: f64, default_nodes: usize, base: Pose, profile: StrainProfile) -> usize {
        let k = self.node_count(length, default_nodes);
        let mut spec = RobotSpec::uniform(name, length, k, base);
        spec.kirchhoff_lock = true;
        spec.fbg = Some(FbgGeometry::symmetric(FBG_RADIUS));
        self.topology.robots.push(spec);
        self.profiles.push(profile);
        self.bases.push(base);
        let r = self.topology.robots.len() - 1;
        self.sensors.fbg_robots.push(r);
        r
    }

    /// A robot whose base pose is estimated; its truth base is still `base`.
    fn free_robot(&mut self, name: &str, length: f64, default_nodes: usize, base: Pose, profile: StrainProfile) -> usize {
        let r = self.robot(name, length, default_nodes, Pose::identity(), profile);
        self.topology.robots[r].fixed_base = false;
        self.bases[r] = base;
        r
    }

    fn body(&mut self, name: &str, truth: Pose) -> usize {
        self.topology.bodies.push(RigidBody {
            name: name.to_string(),
            initial_pose: None,
            fixed: false,
        });
        self.bodies.push(Some(truth));
        self.topology.bodies.len() - 1
    }

    fn tip(&self, robot: usize) -> Endpoint {
        Endpoint::RobotNode {
            robot,
            node: self.topology.robots[robot].tip(),
        }
    }

    /// Node nearest to arclength `s`.
    fn at(&self, robot: usize, s: f64) -> Endpoint {
        let node = self.topology.robots[robot]
            .node_arclengths
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - s).abs().total_cmp(&(b.1 - s).abs()))
            .map(|(k, _)| k)
            .expect("robots have nodes");
        Endpoint::RobotNode { robot, node }
    }

    fn truth(&self, e: &Endpoint) -> Pose {
        match *e {
            Endpoint::RobotNode { robot, node } => {
                let s = &self.topology.robots[robot].node_arclengths;
                propagate(&self.bases[robot], &self.profiles[robot], &s[..=node])[node].pose
            }
            Endpoint::Body(b) => self.bodies[b].expect("bodies carry a truth pose"),
        }
    }

    /// Couples `a` and `b`; `offset_b` is the joint frame in `b`, `offset_a` follows from the truth.
    fn couple(&mut self, a: Endpoint, b: Endpoint, offset_b: Pose, mask: DofMask, covariance: Option<Matrix6<f64>>) {
        let offset_a = (self.truth(&a) * self.truth(&b).inverse() * offset_b).reorthonormalized();
        self.topology.couplings.push(CouplingJoint {
            a,
            b,
            offset_a,
            offset_b,
            dof_mask: mask,
            covariance: covariance.unwrap_or_else(|| Matrix6::from_diagonal(&Vector6::repeat(2e-6))),
        });
    }

    fn finish(mut self) -> Result<GroundTruthScenario, SimError> {
        // Rod ends that are neither fixed nor coupled hold the nominal strain.
        for r in 0..self.topology.robots.len() {
            let spec = &self.topology.robots[r];
            let coupled = |node: usize| {
                self.topology.couplings.iter().any(|c| {
                    [c.a, c.b].contains(&Endpoint::RobotNode { robot: r, node })
                })
            };
            let mut ends = Vec::new();
            if !spec.fixed_base && !coupled(0) {
                ends.push(RodEnd::Proximal);
            }
            if !coupled(spec.tip()) {
                ends.push(RodEnd::Distal);
            }
            self.topology.robots[r].strain_boundary_nominal_ends = ends;
        }
        let mut problem = EstimationProblem::new(
            self.topology,
            hyperparameters_for(&self.options.noise),
            MeasurementSet::default(),
        );
        problem.metadata.insert("scenario".into(), self.name.clone());
        let scenario = GroundTruthScenario {
            name: self.name,
            problem,
            profiles: self.profiles,
            bases: self.bases,
            bodies: self.bodies,
            sensors: self.sensors,
            noise: self.options.noise,
            seed: self.options.seed,
        };
        super::propagate_ground_truth(&scenario)?;
        Ok(scenario)
    }
}

/// Untwisted constant-curvature rod of `length` from `base` whose tip lands on `target`.
///
/// The curvature follows from the chord length; the base is tilted by the smallest rotation
/// that aligns its tangent with the arc.
fn arc_to(base: &Pose, length: f64, target: Vector3<f64>, label: &str) -> Result<(Pose, StrainProfile), SimError> {
    let straight = |pose: &Pose| propagate(pose, &StrainProfile::arc(Vector3::zeros()), &[0.0, 1.0])[1].pose.origin();
    let p0 = base.origin();
    let t0 = (straight(base) - p0).normalize();
    let d = target - p0;
    let chord = d.norm();
    if !(chord > 0.0 && chord <= length) {
        return Err(SimError::Unreachable(format!("{label}: chord {chord} exceeds length {length}")));
    }
    // 2 sin(κL/2)/κ decreases from L to 0 on (0, 2π/L).
    let (mut lo, mut hi) = (0.0, 2.0 * std::f64::consts::PI / length);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let c = if mid == 0.0 { length } else { 2.0 * (0.5 * mid * length).sin() / mid };
        if c > chord {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let kappa = 0.5 * (lo + hi);
    let dir = d / chord;
    let side = t0 - t0.dot(&dir) * dir;
    let m = if side.norm() > 1e-9 {
        side.normalize()
    } else {
        dir.cross(&if dir.z.abs() < 0.9 { Vector3::z() } else { Vector3::x() }).normalize()
    };
    let half = 0.5 * kappa * length;
    let tangent = half.cos() * dir + half.sin() * m;
    let axis = t0.cross(&tangent);
    let tilt = if axis.norm() > 1e-15 {
        rot(axis, axis.norm().atan2(t0.dot(&tangent)))
    } else {
        Matrix3::identity()
    };
    let tilted = frame(&(tilt * base.rotation().transpose()), p0);
    let bend = *tilted.rotation() * tangent.cross(&-m).normalize();
    let tip = |w: Vector3<f64>| propagate(&tilted, &StrainProfile::arc(w), &[0.0, length])[1].pose.origin();
    let omega = [kappa * bend, -kappa * bend]
        .into_iter()
        .min_by(|a, b| (tip(*a) - target).norm().total_cmp(&(tip(*b) - target).norm()))
        .expect("two candidates");
    let miss = (tip(omega) - target).norm();
    if miss > 1e-9 {
        return Err(SimError::Unreachable(format!("{label} (residual {miss:e})")));
    }
    Ok((tilted, StrainProfile::arc(omega)))
}

/// Joint points of a two-robot platform, in platform coordinates.
const EE_JOINTS: [[f64; 3]; 2] = [[0.02, 0.05, 0.0], [0.02, -0.05, 0.0]];

fn joint_point(ee: &Pose, j: [f64; 3]) -> Vector3<f64> {
    ee.inverse().transform_point(&Vector3::from(j))
}

fn two_robot_ee(options: &BuiltinOptions, spherical: bool) -> Result<GroundTruthScenario, SimError> {
    let name = if spherical { "two_robot_ee_spherical" } else { "two_robot_ee" };
    let mut b = Builder::new(name, options);
    let ee_pose = frame(&(rot(Vector3::y(), 0.1) * rot(Vector3::x(), 0.05) * up(0.0)), Vector3::new(0.0, 0.0, 0.23));
    let mask = if spherical { POSITION_MASK } else { FULL_MASK };
    let ee = b.body("end_effector", ee_pose);
    for (i, y) in [0.15, -0.15].into_iter().enumerate() {
        let base = frame(&up(0.0), Vector3::new(0.0, y, 0.0));
        let (base, profile) = arc_to(&base, LENGTH, joint_point(&ee_pose, EE_JOINTS[i]), &format!("robot {i}"))?;
        let r = b.robot(&format!("robot_{}", i + 1), LENGTH, 25, base, profile);
        let tip = b.tip(r);
        b.couple(tip, Endpoint::Body(ee), Pose::from_translation(Vector3::from(EE_JOINTS[i])), mask, None);
    }
    b.sensors.pose.push((Endpoint::Body(ee), FULL_MASK));
    b.finish()
}

fn tip_to_body(options: &BuiltinOptions) -> Result<GroundTruthScenario, SimError> {
    let s_c = options.coupling_arclength.unwrap_or(0.12);
    if !(0.0..=LENGTH).contains(&s_c) {
        return Err(SimError::InvalidOption(format!("coupling arclength {s_c} outside [0, {LENGTH}]")));
    }
    let mut b = Builder::new("tip_to_body", options);
    let r1 = b.robot("robot_1", LENGTH, 25, frame(&up(0.0), Vector3::zeros()), StrainProfile::arc(Vector3::zeros()));
    let node = b.at(r1, s_c);
    let target = b.truth(&node).origin();
    let base2 = frame(&up(0.0), Vector3::new(0.06, 0.0, target.z - 0.22));
    let (base2, profile) = arc_to(&base2, LENGTH, target, "robot 2")?;
    let r2 = b.robot("robot_2", LENGTH, 25, base2, profile);
    let tip = b.tip(r2);
    b.couple(node, tip, Pose::identity(), FULL_MASK, None);
    let tip1 = b.tip(r1);
    b.sensors.pose.push((tip1, FULL_MASK));
    b.finish()
}

/// Angle-indexed platform joint in platform coordinates (platform `x` points back down the rods).
fn platform_joint(radius: f64, angle: f64, depth: f64) -> Vector3<f64> {
    Vector3::new(depth, radius * angle.sin(), radius * angle.cos())
}

fn reconfigurable_parallel(options: &BuiltinOptions) -> Result<GroundTruthScenario, SimError> {
    let mut b = Builder::new("reconfigurable_parallel", options);
    let ee_pose = frame(
        &(rot(Vector3::z(), 0.2) * rot(Vector3::x(), 0.15) * up(0.0)),
        Vector3::new(0.02, 0.01, 0.25),
    );
    let ee = b.body("end_effector", ee_pose);
    for i in 0..3 {
        let angle = std::f64::consts::FRAC_PI_2 + i as f64 * 2.0 * std::f64::consts::FRAC_PI_3;
        let base = frame(&up(angle), 0.05 * Vector3::new(angle.cos(), angle.sin(), 0.0));
        let joint = platform_joint(0.03, angle, 0.02);
        let (base, profile) = arc_to(&base, LENGTH, ee_pose.inverse().transform_point(&joint), &format!("robot {i}"))?;
        let r = b.robot(&format!("robot_{}", i + 1), LENGTH, 25, base, profile);
        let tip = b.tip(r);
        b.couple(tip, Endpoint::Body(ee), Pose::from_translation(joint), FULL_MASK, None);
    }
    b.sensors.pose.push((Endpoint::Body(ee), FULL_MASK));
    b.finish()
}

fn stewart_gough(options: &BuiltinOptions) -> Result<GroundTruthScenario, SimError> {
    let mut b = Builder::new("stewart_gough", options);
    let ee_pose = frame(
        &(rot(Vector3::x(), 0.05) * rot(Vector3::z(), 0.15) * up(0.0)),
        Vector3::new(0.01, -0.01, 0.25),
    );
    let ee = b.body("end_effector", ee_pose);
    let deg = std::f64::consts::PI / 180.0;
    for k in 0..3 {
        let c = 120.0 * k as f64;
        for (j, (base_angle, top_angle)) in [(c - 10.0, c - 40.0), (c + 10.0, c + 40.0)].into_iter().enumerate() {
            let i = 2 * k + j;
            let (ba, ta) = (base_angle * deg, top_angle * deg);
            let base = frame(&up(ba), 0.06 * Vector3::new(ba.cos(), ba.sin(), 0.0));
            let joint = platform_joint(0.04, ta, 0.02);
            let (base, profile) = arc_to(&base, LENGTH, ee_pose.inverse().transform_point(&joint), &format!("leg {i}"))?;
            let r = b.robot(&format!("leg_{}", i + 1), LENGTH, 25, base, profile);
            let tip = b.tip(r);
            // Joint frame follows the leg tip so that torsion about the leg axis is free.
            let offset_b = b.truth(&Endpoint::Body(ee)) * b.truth(&tip).inverse();
            b.couple(tip, Endpoint::Body(ee), offset_b.reorthonormalized(), TORSION_FREE, None);
        }
    }
    b.sensors.pose.push((Endpoint::Body(ee), FULL_MASK));
    b.finish()
}

fn delta(options: &BuiltinOptions) -> Result<GroundTruthScenario, SimError> {
    let mut b = Builder::new("delta", options);
    let ee_pose = frame(&(rot(Vector3::z(), 0.1) * up(0.0)), Vector3::new(0.01, -0.01, 0.22));
    let ee = b.body("end_effector", ee_pose);
    for k in 0..3 {
        let c = std::f64::consts::FRAC_PI_2 + k as f64 * 2.0 * std::f64::consts::FRAC_PI_3;
        let ee_joint = platform_joint(0.03, c, 0.0);
        let link_pose = frame(&up(c), ee_pose.inverse().transform_point(&ee_joint));
        let link = b.body(&format!("link_{}", k + 1), link_pose);
        let radial = Vector3::new(c.cos(), c.sin(), 0.0);
        let tangential = Vector3::new(-c.sin(), c.cos(), 0.0);
        for (j, side) in [1.0, -1.0].into_iter().enumerate() {
            let base = frame(&up(c), 0.08 * radial + 0.02 * side * tangential);
            let attach = [0.01, 0.02 * side, 0.0];
            let (base, profile) = arc_to(&base, LENGTH, joint_point(&link_pose, attach), &format!("chain {k} rod {j}"))?;
            let r = b.robot(&format!("chain_{}_rod_{}", k + 1, j + 1), LENGTH, 25, base, profile);
            let tip = b.tip(r);
            b.couple(tip, Endpoint::Body(link), Pose::from_translation(Vector3::from(attach)), FULL_MASK, None);
        }
        b.couple(Endpoint::Body(link), Endpoint::Body(ee), Pose::from_translation(ee_joint), POSITION_MASK, None);
    }
    b.sensors.pose.push((Endpoint::Body(ee), FULL_MASK));
    b.finish()
}

fn extended(options: &BuiltinOptions) -> Result<GroundTruthScenario, SimError> {
    let mut b = Builder::new("extended", options);
    let ee_pose = frame(
        &(rot(Vector3::y(), 0.05) * rot(Vector3::x(), -0.18) * up(0.0)),
        Vector3::new(0.012, 0.0, 0.22),
    );
    let ee = b.body("end_effector", ee_pose);
    // One robot stands vertically below the platform, the other reaches it horizontally.
    let joints = [[0.02, 0.0, 0.0], [0.0, 0.0, 0.04]];
    let lengths = [0.24, 0.20];
    let nodes = [25, 21];
    let j1 = joint_point(&ee_pose, joints[1]);
    let bases = [
        frame(&up(0.0), Vector3::new(0.024, 0.02, 0.0)),
        frame(
            &pointing(&Vector3::new(-1.0, 0.0, 0.194)),
            j1 + Vector3::new(0.178, -0.045, 0.027),
        ),
    ];
    let mut robots = Vec::new();
    for i in 0..2 {
        let (base, profile) =
            arc_to(&bases[i], lengths[i], joint_point(&ee_pose, joints[i]), &format!("robot {i}"))?;
        let r = b.robot(&format!("robot_{}", i + 1), lengths[i], nodes[i], base, profile);
        let tip = b.tip(r);
        b.couple(tip, Endpoint::Body(ee), Pose::from_translation(Vector3::from(joints[i])), FULL_MASK, None);
        robots.push(r);
    }
    // Third robot spans between the first two.
    let from = b.at(robots[0], 0.15);
    let to = b.at(robots[1], 0.064);
    let start = b.truth(&from).origin() + Vector3::new(0.0, -0.01, 0.0);
    let end = b.truth(&to).origin() + Vector3::new(0.0, 0.01, 0.0);
    let chord = end - start;
    let tilted = rot(chord.cross(&Vector3::z()), 0.5) * chord;
    let (base3, profile) = arc_to(&frame(&pointing(&tilted), start), 0.22, end, "robot 3")?;
    let r3 = b.free_robot("robot_3", 0.22, 23, base3, profile);
    b.topology.robots[r3].prior_psd_scale = 20.0;
    // The joint to the second robot admits some twist about the rod axis.
    let loose = Matrix6::from_diagonal(&Vector6::new(2e-6, 2e-6, 2e-6, 2e-1, 2e-6, 2e-6));
    let (proximal, distal) = (Endpoint::RobotNode { robot: r3, node: 0 }, b.tip(r3));
    b.couple(from, proximal, Pose::identity(), FULL_MASK, None);
    b.couple(to, distal, Pose::identity(), FULL_MASK, Some(loose));
    b.sensors.pose.push((Endpoint::Body(ee), FULL_MASK));
    b.finish()
}

/// Two robots on a common platform with linearly varying curvature and twist (an analogue of a
/// tendon-bent configuration under an external platform moment).
fn sensor_study(options: &BuiltinOptions) -> Result<GroundTruthScenario, SimError> {
    let mut b = Builder::new("sensor_study", options);
    let base1 = frame(&up(0.0), Vector3::new(0.0, 0.05, 0.0));
    let profile1 = StrainProfile::linear(Vector3::new(0.2, -1.25, 0.3), Vector3::new(-1.0, 3.0, 1.5));
    let tip1 = propagate(&base1, &profile1, &[0.0, LENGTH])[1].pose;
    // Platform mounted on the first robot's tip with a small extra rotation.
    let mount = Pose::from_parts(rot(Vector3::new(1.0, 0.3, 0.0), 0.15), Vector3::from(EE_JOINTS[0]))
        .expect("rotation matrices are orthonormal");
    let ee_pose = mount * tip1;
    let ee = b.body("end_effector", ee_pose);
    let r1 = b.robot("robot_1", LENGTH, 25, base1, profile1);
    let t1 = b.tip(r1);
    b.couple(t1, Endpoint::Body(ee), Pose::from_translation(Vector3::from(EE_JOINTS[0])), FULL_MASK, None);
    // The second robot's base is placed so that its tip lands on the platform joint.
    let profile2 = StrainProfile::linear(Vector3::new(-0.3, 1.5, -0.8), Vector3::new(2.0, 5.0, -2.0));
    let reach = propagate(&frame(&up(0.0), Vector3::zeros()), &profile2, &[0.0, LENGTH])[1].pose.origin();
    let base2 = frame(&up(0.0), joint_point(&ee_pose, EE_JOINTS[1]) - reach);
    let r2 = b.robot("robot_2", LENGTH, 25, base2, profile2);
    let t2 = b.tip(r2);
    b.couple(t2, Endpoint::Body(ee), Pose::from_translation(Vector3::from(EE_JOINTS[1])), FULL_MASK, None);
    b.sensors.pose.push((Endpoint::Body(ee), FULL_MASK));
    b.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::uniform_arclengths;

    #[test]
    fn every_builtin_closes() {
        for name in BUILTIN_NAMES {
            let s = builtin(name, &BuiltinOptions::default()).unwrap_or_else(|e| panic!("{name}: {e}"));
            super::super::propagate_ground_truth(&s).unwrap();
        }
    }

    #[test]
    fn unknown_name_is_rejected() {
        assert!(matches!(
            builtin("nope", &BuiltinOptions::default()),
            Err(SimError::UnknownScenario(_))
        ));
    }

    #[test]
    fn topology_shapes() {
        let sg = builtin("stewart_gough", &BuiltinOptions::default()).unwrap();
        assert_eq!(sg.problem.topology.robots.len(), 6);
        assert_eq!(sg.problem.topology.couplings.len(), 6);
        assert_eq!(sg.problem.topology.bodies.len(), 1);
        let d = builtin("delta", &BuiltinOptions::default()).unwrap();
        assert_eq!(d.problem.topology.robots.len(), 6);
        assert_eq!(d.problem.topology.bodies.len(), 4);
        let e = builtin("extended", &BuiltinOptions::default()).unwrap();
        let counts: Vec<usize> = e.problem.topology.robots.iter().map(|r| r.node_count()).collect();
        assert_eq!(counts, vec![25, 21, 23]);
    }

    #[test]
    fn node_override_keeps_spacing() {
        let s = builtin(
            "two_robot_ee",
            &BuiltinOptions {
                nodes: Some(13),
                ..Default::default()
            },
        )
        .unwrap();
        let r = &s.problem.topology.robots[0];
        assert_eq!(r.node_count(), 13);
        assert!((r.node_arclengths[1] - 0.02).abs() < 1e-15);
        assert_eq!(uniform_arclengths(0.24, 13), r.node_arclengths);
    }
}
