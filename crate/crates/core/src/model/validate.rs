use std::collections::HashSet;
use std::fmt;

use super::config::check_arclengths;
use super::{is_spd_on, BlockId, Endpoint, EstimationProblem, ModelError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiagnosticKind {
    UnknownReference,
    NotSpd,
    DuplicateMeasurement,
    InvalidGeometry,
    /// A connected group of robots and bodies has nothing fixing its global pose.
    UnderConstrained,
    /// A robot has no direct strain information; solvable only through couplings or distal poses.
    WeakStrainAnchor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Diagnostic {
    pub kind: DiagnosticKind,
    pub location: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Diagnostics {
    pub errors: Vec<Diagnostic>,
    pub warnings: Vec<Diagnostic>,
}

impl Diagnostics {
    pub fn is_valid(&self) -> bool {
        self.errors.is_empty()
    }

    pub fn is_under_constrained(&self) -> bool {
        self.errors.iter().any(|d| d.kind == DiagnosticKind::UnderConstrained)
    }

    /// First error other than a rank pre-check failure, as a [`ModelError`].
    pub fn first_structural_error(&self) -> Option<ModelError> {
        self.errors
            .iter()
            .find(|d| d.kind != DiagnosticKind::UnderConstrained)
            .map(|d| match d.kind {
                DiagnosticKind::UnknownReference => ModelError::UnknownReference {
                    location: d.location.clone(),
                    reference: d.message.clone(),
                },
                DiagnosticKind::NotSpd => ModelError::NotSpd {
                    location: d.location.clone(),
                },
                DiagnosticKind::DuplicateMeasurement => ModelError::DuplicateMeasurement(d.to_string()),
                _ => ModelError::schema(d.location.clone(), d.message.clone()),
            })
    }

    fn error(&mut self, kind: DiagnosticKind, location: impl Into<String>, message: impl Into<String>) {
        self.errors.push(Diagnostic {
            kind,
            location: location.into(),
            message: message.into(),
        });
    }

    fn warn(&mut self, kind: DiagnosticKind, location: impl Into<String>, message: impl Into<String>) {
        self.warnings.push(Diagnostic {
            kind,
            location: location.into(),
            message: message.into(),
        });
    }
}

/// Structural checks plus a rank pre-check for unanchored groups.
pub fn validate_topology(problem: &EstimationProblem) -> Diagnostics {
    let mut d = Diagnostics::default();
    let t = &problem.topology;
    let h = &problem.hyper;

    for (name, ok) in [
        ("hyperparameters.qc", is_spd_on(&h.qc, &[true; 6])),
        ("hyperparameters.r_pose_robot", is_spd_on(&h.r_pose_robot, &[true; 6])),
        ("hyperparameters.r_pose_body", is_spd_on(&h.r_pose_body, &[true; 6])),
        ("hyperparameters.r_fbg", is_spd_on(&h.r_fbg, &[true; 4])),
        ("hyperparameters.r_coupling", is_spd_on(&h.r_coupling, &[true; 6])),
    ] {
        if !ok {
            d.error(DiagnosticKind::NotSpd, name, "not symmetric positive definite");
        }
    }

    for (i, r) in t.robots.iter().enumerate() {
        let location = format!("robots[{i}]");
        if !(r.length.is_finite() && r.length > 0.0) {
            d.error(DiagnosticKind::InvalidGeometry, &location, "length must be positive");
        } else if let Err(e) = check_arclengths(&r.node_arclengths, r.length, &format!("{location}.arclengths")) {
            d.error(DiagnosticKind::InvalidGeometry, &location, e.to_string());
        }
        if let Some(g) = &r.fbg {
            if !(g.core_radius.is_finite() && g.core_radius > 0.0) {
                d.error(DiagnosticKind::InvalidGeometry, &location, "fbg core radius must be positive");
            }
        }
    }

    for (i, c) in t.couplings.iter().enumerate() {
        let location = format!("couplings[{i}]");
        for e in [&c.a, &c.b] {
            if !t.contains(e) {
                d.error(DiagnosticKind::UnknownReference, &location, e.to_string());
            }
        }
        if c.a == c.b {
            d.error(DiagnosticKind::InvalidGeometry, &location, "couples an element to itself");
        }
        if !is_spd_on(&c.covariance, &c.dof_mask) {
            d.error(DiagnosticKind::NotSpd, &location, "covariance not SPD on active DOFs");
        }
    }

    let mut seen_pose = HashSet::new();
    for (i, m) in problem.measurements.pose.iter().enumerate() {
        let location = format!("pose measurement {i} ({})", m.target);
        if !t.contains(&m.target) {
            d.error(DiagnosticKind::UnknownReference, &location, m.target.to_string());
            continue;
        }
        if !is_spd_on(&problem.pose_covariance(m), &m.mask) {
            d.error(DiagnosticKind::NotSpd, &location, "covariance not SPD on active DOFs");
        }
        if !seen_pose.insert(m.target) {
            d.error(DiagnosticKind::DuplicateMeasurement, &location, "second pose measurement on this target");
        }
    }
    let mut seen_fbg = HashSet::new();
    for (i, m) in problem.measurements.fbg.iter().enumerate() {
        let target = Endpoint::RobotNode { robot: m.robot, node: m.node };
        let location = format!("fbg measurement {i} ({target})");
        if !t.contains(&target) {
            d.error(DiagnosticKind::UnknownReference, &location, target.to_string());
            continue;
        }
        if t.robots[m.robot].fbg.is_none() {
            d.error(DiagnosticKind::InvalidGeometry, &location, "robot has no fbg geometry");
        }
        if !is_spd_on(&problem.fbg_covariance(m), &m.mask) {
            d.error(DiagnosticKind::NotSpd, &location, "covariance not SPD on active cores");
        }
        if !seen_fbg.insert(target) {
            d.error(DiagnosticKind::DuplicateMeasurement, &location, "second fbg measurement at this node");
        }
    }
    for (i, bc) in problem.boundary_conditions.iter().enumerate() {
        if !t.contains(&bc.target) {
            d.error(
                DiagnosticKind::UnknownReference,
                format!("boundary_conditions[{i}]"),
                bc.target.to_string(),
            );
        }
    }
    if !d.is_valid() {
        return d;
    }

    check_gauge(problem, &mut d);
    check_strain_anchors(problem, &mut d);
    d
}

fn entity(problem: &EstimationProblem, e: &Endpoint) -> usize {
    match *e {
        Endpoint::RobotNode { robot, .. } => robot,
        Endpoint::Body(b) => problem.topology.robots.len() + b,
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Groups of robots and bodies (by entity index, robots first) connected through couplings
/// with nothing fixing their global pose.
fn unanchored_groups(problem: &EstimationProblem) -> Vec<Vec<usize>> {
    let t = &problem.topology;
    let n = t.robots.len() + t.bodies.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for c in &t.couplings {
        let (a, b) = (entity(problem, &c.a), entity(problem, &c.b));
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        parent[ra] = rb;
    }
    let mut anchored = vec![false; n];
    for (i, r) in t.robots.iter().enumerate() {
        if r.fixed_base {
            anchored[i] = true;
        }
    }
    for (b, body) in t.bodies.iter().enumerate() {
        if body.fixed {
            anchored[t.robots.len() + b] = true;
        }
    }
    for m in &problem.measurements.pose {
        anchored[entity(problem, &m.target)] = true;
    }
    for bc in &problem.boundary_conditions {
        if bc.pose_mask.iter().all(|&b| b) {
            anchored[entity(problem, &bc.target)] = true;
        }
    }
    let mut root_anchored = vec![false; n];
    for i in 0..n {
        let r = find(&mut parent, i);
        root_anchored[r] |= anchored[i];
    }
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        if root_anchored[r] {
            continue;
        }
        match groups.iter_mut().find(|(root, _)| *root == r) {
            Some((_, members)) => members.push(i),
            None => groups.push((r, vec![i])),
        }
    }
    groups.into_iter().map(|(_, m)| m).collect()
}

/// First state block of every group lacking a gauge anchor.
pub fn unanchored_blocks(problem: &EstimationProblem) -> Vec<BlockId> {
    let robots = problem.topology.robots.len();
    unanchored_groups(problem)
        .into_iter()
        .map(|g| {
            if g[0] < robots {
                BlockId::Node { robot: g[0], node: 0 }
            } else {
                BlockId::Body(g[0] - robots)
            }
        })
        .collect()
}

fn check_gauge(problem: &EstimationProblem, d: &mut Diagnostics) {
    let robots = problem.topology.robots.len();
    for group in unanchored_groups(problem) {
        let members: Vec<String> = group
            .iter()
            .map(|&j| {
                if j < robots {
                    format!("robot:{j}")
                } else {
                    format!("body:{}", j - robots)
                }
            })
            .collect();
        d.error(
            DiagnosticKind::UnderConstrained,
            members.join(" "),
            "no fixed base, fixed body or pose measurement anchors this group",
        );
    }
}

fn check_strain_anchors(problem: &EstimationProblem, d: &mut Diagnostics) {
    let t = &problem.topology;
    for (i, r) in t.robots.iter().enumerate() {
        let fbg = problem.measurements.fbg.iter().any(|m| m.robot == i);
        let bc = !r.strain_boundary_nominal_ends.is_empty()
            || problem.boundary_conditions.iter().any(|bc| {
                matches!(bc.target, Endpoint::RobotNode { robot, .. } if robot == i)
                    && bc.strain_mask.iter().any(|&b| b)
            });
        let touches_beyond_base = |e: &Endpoint| {
            matches!(*e, Endpoint::RobotNode { robot, node } if robot == i && (node > 0 || !r.fixed_base))
        };
        let poses = problem.measurements.pose.iter().any(|m| touches_beyond_base(&m.target))
            || t.couplings.iter().any(|c| touches_beyond_base(&c.a) || touches_beyond_base(&c.b));
        if !(fbg || bc || poses) {
            d.warn(
                DiagnosticKind::WeakStrainAnchor,
                format!("robots[{i}]"),
                "no strain measurement, strain boundary condition or distal pose constraint",
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liegroup::Pose;
    use crate::model::{CouplingJoint, Hyperparameters, MeasurementSet, RobotSpec, SystemTopology};
    use nalgebra::Matrix6;

    fn robot(fixed: bool) -> RobotSpec {
        let mut r = RobotSpec::uniform("r", 0.2, 5, Pose::identity());
        r.fixed_base = fixed;
        r
    }

    fn problem(robots: Vec<RobotSpec>, couplings: Vec<CouplingJoint>) -> EstimationProblem {
        EstimationProblem::new(
            SystemTopology { robots, bodies: vec![], couplings },
            Hyperparameters::default(),
            MeasurementSet::default(),
        )
    }

    fn tip_to_tip() -> CouplingJoint {
        CouplingJoint {
            a: Endpoint::RobotNode { robot: 0, node: 4 },
            b: Endpoint::RobotNode { robot: 1, node: 4 },
            offset_a: Pose::identity(),
            offset_b: Pose::identity(),
            dof_mask: [true; 6],
            covariance: Matrix6::identity() * 2e-6,
        }
    }

    #[test]
    fn fixed_single_robot_is_valid() {
        let d = validate_topology(&problem(vec![robot(true)], vec![]));
        assert!(d.is_valid());
        assert_eq!(d.warnings.len(), 1);
    }

    #[test]
    fn free_floating_pair_is_under_constrained() {
        let d = validate_topology(&problem(vec![robot(false), robot(false)], vec![tip_to_tip()]));
        assert!(d.is_under_constrained());
        assert_eq!(d.errors.len(), 1);
        assert!(d.first_structural_error().is_none());
    }

    #[test]
    fn non_spd_coupling_rejected() {
        let mut c = tip_to_tip();
        c.covariance[(2, 2)] = -1.0;
        let d = validate_topology(&problem(vec![robot(true), robot(true)], vec![c.clone()]));
        assert!(matches!(d.first_structural_error(), Some(ModelError::NotSpd { .. })));
        c.dof_mask = [true, true, false, true, true, true];
        assert!(validate_topology(&problem(vec![robot(true), robot(true)], vec![c])).is_valid());
    }
}
