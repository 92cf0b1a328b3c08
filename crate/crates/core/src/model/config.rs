//! TOML configuration schema.
//!
//! ```toml
//! [metadata]
//! scenario = "two_robot_ee"
//!
//! [hyperparameters]
//! qc = [0.02, 0.02, 0.02, 2000.0, 2000.0, 2000.0]   # diagonal or full 6x6
//!
//! [[robots]]
//! name = "left"
//! length = 0.24
//! node_spacing = 0.01            # or `nodes = 25`, or `arclengths = [...]`
//! base_pose = { translation = [0.0, 0.05, 0.0], quaternion = [1.0, 0.0, 0.0, 0.0] }
//!
//! [[rigid_bodies]]
//! name = "ee"
//!
//! [[couplings]]
//! a = "robot:0:tip"
//! b = "body:0"
//! offset_b = { matrix = [[1, 0, 0, 0], [0, 1, 0, -0.05], [0, 0, 1, 0], [0, 0, 0, 1]] }
//! dof_mask = "111000"
//! ```

use std::collections::BTreeMap;

use nalgebra::{SMatrix, Vector3};
use serde::{Deserialize, Serialize};

use super::{
    uniform_arclengths, BoundaryCondition, CouplingJoint, EndpointRef, EstimationProblem, FbgGeometry,
    Hyperparameters, LineSearchSettings, MeasurementSet, ModelError, OrderingStrategy, PriorJacobianMode,
    RigidBody,
    RobotSpec, RodEnd, SolverSettings, SystemTopology,
};
use crate::liegroup::{Pose, Strain6};

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    metadata: BTreeMap<String, String>,
    #[serde(default)]
    hyperparameters: RawHyper,
    #[serde(default)]
    robots: Vec<RawRobot>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    rigid_bodies: Vec<RawBody>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    couplings: Vec<RawCoupling>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    boundary_conditions: Vec<RawBoundary>,
}

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawHyper {
    #[serde(skip_serializing_if = "Option::is_none")]
    qc: Option<RawMatrix>,
    #[serde(skip_serializing_if = "Option::is_none")]
    r_pose_robot: Option<RawMatrix>,
    #[serde(skip_serializing_if = "Option::is_none")]
    r_pose_body: Option<RawMatrix>,
    #[serde(skip_serializing_if = "Option::is_none")]
    r_fbg: Option<RawMatrix>,
    #[serde(skip_serializing_if = "Option::is_none")]
    r_coupling: Option<RawMatrix>,
    #[serde(skip_serializing_if = "Option::is_none")]
    solver: Option<RawSolver>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawSolver {
    #[serde(skip_serializing_if = "Option::is_none")]
    max_iters: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    convergence_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ordering: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    line_search: Option<RawLineSearch>,
    #[serde(skip_serializing_if = "Option::is_none")]
    prior_jacobian: Option<String>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawLineSearch {
    initial_step: Option<f64>,
    shrink: Option<f64>,
    armijo: Option<f64>,
    min_step: Option<f64>,
}

/// Either a diagonal (list of numbers) or a full row-major matrix (list of rows).
#[derive(Debug, Deserialize, Serialize)]
#[serde(untagged)]
enum RawMatrix {
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(untagged)]
enum RawPose {
    Matrix { matrix: RawPoseMatrix },
    TranslationQuaternion { translation: [f64; 3], quaternion: [f64; 4] },
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(untagged)]
enum RawPoseMatrix {
    Rows(Vec<Vec<f64>>),
    Flat(Vec<f64>),
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawRobot {
    #[serde(default)]
    name: String,
    length: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    nodes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    node_spacing: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    arclengths: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    base_pose: Option<RawPose>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fixed_base: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fbg: Option<RawFbg>,
    #[serde(default)]
    kirchhoff_lock: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    strain_nominal_ends: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    prior_psd_scale: Option<f64>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawFbg {
    core_radius: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    core_angles: Option<[f64; 3]>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawBody {
    #[serde(default)]
    name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    initial_pose: Option<RawPose>,
    #[serde(default)]
    fixed: bool,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawCoupling {
    a: String,
    b: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    offset_a: Option<RawPose>,
    #[serde(skip_serializing_if = "Option::is_none")]
    offset_b: Option<RawPose>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dof_mask: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    covariance: Option<RawMatrix>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawBoundary {
    target: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pose: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    strain: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    strain_value: Option<[f64; 6]>,
}

/// Parses a configuration. Measurements are left empty.
pub fn problem_from_config(text: &str) -> Result<EstimationProblem, ModelError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| {
        let location = match e.span() {
            Some(span) => {
                let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
                format!("config line {line}")
            }
            None => "config".to_string(),
        };
        ModelError::schema(location, e.message().to_string())
    })?;

    let hyper = convert_hyper(&raw.hyperparameters)?;

    let mut robots = Vec::with_capacity(raw.robots.len());
    for (i, r) in raw.robots.iter().enumerate() {
        robots.push(convert_robot(r, &format!("robots[{i}]"))?);
    }
    let mut bodies = Vec::with_capacity(raw.rigid_bodies.len());
    for (i, b) in raw.rigid_bodies.iter().enumerate() {
        let location = format!("rigid_bodies[{i}]");
        bodies.push(RigidBody {
            name: if b.name.is_empty() { format!("body{i}") } else { b.name.clone() },
            initial_pose: b
                .initial_pose
                .as_ref()
                .map(|p| convert_pose(p, &format!("{location}.initial_pose")))
                .transpose()?,
            fixed: b.fixed,
        });
    }
    let mut topology = SystemTopology {
        robots,
        bodies,
        couplings: Vec::new(),
    };

    for (i, c) in raw.couplings.iter().enumerate() {
        let location = format!("couplings[{i}]");
        let a = parse_endpoint(&c.a, &topology, &format!("{location}.a"))?;
        let b = parse_endpoint(&c.b, &topology, &format!("{location}.b"))?;
        let covariance = match &c.covariance {
            Some(m) => convert_matrix::<6>(m, &format!("{location}.covariance"))?,
            None => hyper.r_coupling,
        };
        topology.couplings.push(CouplingJoint {
            a,
            b,
            offset_a: optional_pose(&c.offset_a, &format!("{location}.offset_a"))?,
            offset_b: optional_pose(&c.offset_b, &format!("{location}.offset_b"))?,
            dof_mask: match &c.dof_mask {
                Some(s) => parse_mask::<6>(s, &format!("{location}.dof_mask"))?,
                None => [true; 6],
            },
            covariance,
        });
    }

    let mut boundary_conditions = Vec::new();
    for (i, bc) in raw.boundary_conditions.iter().enumerate() {
        let location = format!("boundary_conditions[{i}]");
        boundary_conditions.push(BoundaryCondition {
            target: parse_endpoint(&bc.target, &topology, &format!("{location}.target"))?,
            pose_mask: match &bc.pose {
                Some(s) => parse_mask::<6>(s, &format!("{location}.pose"))?,
                None => [false; 6],
            },
            strain_mask: match &bc.strain {
                Some(s) => parse_mask::<6>(s, &format!("{location}.strain"))?,
                None => [false; 6],
            },
            strain_value: bc.strain_value.map(|v| Strain6::from_column_slice(&v)),
        });
    }

    Ok(EstimationProblem {
        topology,
        hyper,
        measurements: MeasurementSet::default(),
        boundary_conditions,
        metadata: raw.metadata,
    })
}

/// Serializes everything except measurements. Poses are written as 4x4 matrices and node
/// placement as explicit arclengths so that a reload reproduces the problem exactly.
pub fn problem_to_config(problem: &EstimationProblem) -> String {
    let h = &problem.hyper;
    let raw = RawConfig {
        metadata: problem.metadata.clone(),
        hyperparameters: RawHyper {
            qc: Some(emit_matrix(&h.qc)),
            r_pose_robot: Some(emit_matrix(&h.r_pose_robot)),
            r_pose_body: Some(emit_matrix(&h.r_pose_body)),
            r_fbg: Some(emit_matrix(&h.r_fbg)),
            r_coupling: Some(emit_matrix(&h.r_coupling)),
            solver: Some(RawSolver {
                max_iters: Some(h.solver.max_iters),
                convergence_norm: Some(h.solver.convergence_norm),
                ordering: Some(
                    match h.solver.ordering {
                        OrderingStrategy::RobotsSequential => "robots_sequential",
                        OrderingStrategy::MinimumDegree => "minimum_degree",
                    }
                    .to_string(),
                ),
                line_search: Some(RawLineSearch {
                    initial_step: Some(h.solver.line_search.initial_step),
                    shrink: Some(h.solver.line_search.shrink),
                    armijo: Some(h.solver.line_search.armijo),
                    min_step: Some(h.solver.line_search.min_step),
                }),
                prior_jacobian: Some(
                    match h.solver.prior_jacobian {
                        PriorJacobianMode::Exact => "exact",
                        PriorJacobianMode::FirstOrder => "first_order",
                    }
                    .to_string(),
                ),
            }),
        },
        robots: problem
            .topology
            .robots
            .iter()
            .map(|r| RawRobot {
                name: r.name.clone(),
                length: r.length,
                nodes: None,
                node_spacing: None,
                arclengths: Some(r.node_arclengths.clone()),
                base_pose: Some(emit_pose(&r.base_pose)),
                fixed_base: Some(r.fixed_base),
                fbg: r.fbg.map(|g| RawFbg {
                    core_radius: g.core_radius,
                    core_angles: Some(g.core_angles),
                }),
                kirchhoff_lock: r.kirchhoff_lock,
                strain_nominal_ends: r
                    .strain_boundary_nominal_ends
                    .iter()
                    .map(|e| e.as_str().to_string())
                    .collect(),
                prior_psd_scale: Some(r.prior_psd_scale),
            })
            .collect(),
        rigid_bodies: problem
            .topology
            .bodies
            .iter()
            .map(|b| RawBody {
                name: b.name.clone(),
                initial_pose: b.initial_pose.as_ref().map(emit_pose),
                fixed: b.fixed,
            })
            .collect(),
        couplings: problem
            .topology
            .couplings
            .iter()
            .map(|c| RawCoupling {
                a: c.a.to_string(),
                b: c.b.to_string(),
                offset_a: Some(emit_pose(&c.offset_a)),
                offset_b: Some(emit_pose(&c.offset_b)),
                dof_mask: Some(emit_mask(&c.dof_mask)),
                covariance: Some(emit_matrix(&c.covariance)),
            })
            .collect(),
        boundary_conditions: problem
            .boundary_conditions
            .iter()
            .map(|bc| RawBoundary {
                target: bc.target.to_string(),
                pose: Some(emit_mask(&bc.pose_mask)),
                strain: Some(emit_mask(&bc.strain_mask)),
                strain_value: bc.strain_value.map(|v| {
                    let mut a = [0.0; 6];
                    a.copy_from_slice(v.as_slice());
                    a
                }),
            })
            .collect(),
    };
    toml::to_string(&raw).expect("config serialization cannot fail")
}

fn convert_hyper(raw: &RawHyper) -> Result<Hyperparameters, ModelError> {
    let mut h = Hyperparameters::default();
    if let Some(m) = &raw.qc {
        h.qc = convert_matrix::<6>(m, "hyperparameters.qc")?;
    }
    if let Some(m) = &raw.r_pose_robot {
        h.r_pose_robot = convert_matrix::<6>(m, "hyperparameters.r_pose_robot")?;
    }
    if let Some(m) = &raw.r_pose_body {
        h.r_pose_body = convert_matrix::<6>(m, "hyperparameters.r_pose_body")?;
    }
    if let Some(m) = &raw.r_fbg {
        h.r_fbg = convert_matrix::<4>(m, "hyperparameters.r_fbg")?;
    }
    if let Some(m) = &raw.r_coupling {
        h.r_coupling = convert_matrix::<6>(m, "hyperparameters.r_coupling")?;
    }
    if let Some(s) = &raw.solver {
        let mut settings = SolverSettings::default();
        if let Some(v) = s.max_iters {
            settings.max_iters = v;
        }
        if let Some(v) = s.convergence_norm {
            settings.convergence_norm = v;
        }
        if let Some(o) = &s.ordering {
            settings.ordering = match o.as_str() {
                "robots_sequential" | "natural" => OrderingStrategy::RobotsSequential,
                "minimum_degree" => OrderingStrategy::MinimumDegree,
                other => {
                    return Err(ModelError::schema(
                        "hyperparameters.solver.ordering",
                        format!("unknown ordering `{other}` (robots_sequential | minimum_degree)"),
                    ))
                }
            };
        }
        if let Some(p) = &s.prior_jacobian {
            settings.prior_jacobian = match p.as_str() {
                "exact" => PriorJacobianMode::Exact,
                "first_order" => PriorJacobianMode::FirstOrder,
                other => {
                    return Err(ModelError::schema(
                        "hyperparameters.solver.prior_jacobian",
                        format!("unknown mode `{other}` (exact | first_order)"),
                    ))
                }
            };
        }
        if let Some(ls) = &s.line_search {
            let d = LineSearchSettings::default();
            settings.line_search = LineSearchSettings {
                initial_step: ls.initial_step.unwrap_or(d.initial_step),
                shrink: ls.shrink.unwrap_or(d.shrink),
                armijo: ls.armijo.unwrap_or(d.armijo),
                min_step: ls.min_step.unwrap_or(d.min_step),
            };
        }
        let ls = &settings.line_search;
        if !(ls.shrink > 0.0 && ls.shrink < 1.0) || ls.initial_step <= 0.0 || ls.min_step <= 0.0 {
            return Err(ModelError::schema(
                "hyperparameters.solver.line_search",
                "requires 0 < shrink < 1 and positive steps",
            ));
        }
        h.solver = settings;
    }
    Ok(h)
}

fn convert_robot(r: &RawRobot, location: &str) -> Result<RobotSpec, ModelError> {
    if !(r.length.is_finite() && r.length > 0.0) {
        return Err(ModelError::schema(format!("{location}.length"), "must be positive"));
    }
    let given = [r.nodes.is_some(), r.node_spacing.is_some(), r.arclengths.is_some()]
        .iter()
        .filter(|&&b| b)
        .count();
    if given > 1 {
        return Err(ModelError::schema(
            location,
            "give only one of `nodes`, `node_spacing` and `arclengths`",
        ));
    }
    let node_arclengths = if let Some(a) = &r.arclengths {
        a.clone()
    } else if let Some(ds) = r.node_spacing {
        if !(ds.is_finite() && ds > 0.0) {
            return Err(ModelError::schema(format!("{location}.node_spacing"), "must be positive"));
        }
        let intervals = r.length / ds;
        let n = intervals.round();
        if (intervals - n).abs() > 1e-9 * intervals.max(1.0) || n < 1.0 {
            return Err(ModelError::schema(
                format!("{location}.node_spacing"),
                "must divide the robot length",
            ));
        }
        uniform_arclengths(r.length, n as usize + 1)
    } else if let Some(n) = r.nodes {
        if n < 2 {
            return Err(ModelError::schema(format!("{location}.nodes"), "must be at least 2"));
        }
        uniform_arclengths(r.length, n)
    } else {
        return Err(ModelError::schema(
            location,
            "missing node placement (`nodes`, `node_spacing` or `arclengths`)",
        ));
    };
    check_arclengths(&node_arclengths, r.length, &format!("{location}.arclengths"))?;

    let fbg = match &r.fbg {
        Some(f) => {
            if !(f.core_radius.is_finite() && f.core_radius > 0.0) {
                return Err(ModelError::schema(format!("{location}.fbg.core_radius"), "must be positive"));
            }
            let mut g = FbgGeometry::symmetric(f.core_radius);
            if let Some(angles) = f.core_angles {
                g.core_angles = angles;
            }
            Some(g)
        }
        None => None,
    };
    let mut ends = Vec::new();
    for (j, e) in r.strain_nominal_ends.iter().enumerate() {
        let end = match e.as_str() {
            "proximal" => RodEnd::Proximal,
            "distal" => RodEnd::Distal,
            other => {
                return Err(ModelError::schema(
                    format!("{location}.strain_nominal_ends[{j}]"),
                    format!("unknown end `{other}` (proximal | distal)"),
                ))
            }
        };
        if !ends.contains(&end) {
            ends.push(end);
        }
    }
    let prior_psd_scale = r.prior_psd_scale.unwrap_or(1.0);
    if !(prior_psd_scale.is_finite() && prior_psd_scale > 0.0) {
        return Err(ModelError::schema(format!("{location}.prior_psd_scale"), "must be positive"));
    }
    Ok(RobotSpec {
        name: r.name.clone(),
        length: r.length,
        node_arclengths,
        base_pose: optional_pose(&r.base_pose, &format!("{location}.base_pose"))?,
        fixed_base: r.fixed_base.unwrap_or(true),
        fbg,
        kirchhoff_lock: r.kirchhoff_lock,
        strain_boundary_nominal_ends: ends,
        prior_psd_scale,
    })
}

pub(crate) fn check_arclengths(a: &[f64], length: f64, location: &str) -> Result<(), ModelError> {
    if a.len() < 2 {
        return Err(ModelError::schema(location, "needs at least 2 nodes"));
    }
    if a[0] != 0.0 || a[a.len() - 1] != length {
        return Err(ModelError::schema(location, "must start at 0 and end at the robot length"));
    }
    if a.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(ModelError::schema(
            location,
            "must be strictly increasing (zero-length intervals are not allowed)",
        ));
    }
    Ok(())
}

fn parse_endpoint(
    s: &str,
    topology: &SystemTopology,
    location: &str,
) -> Result<super::Endpoint, ModelError> {
    let r: EndpointRef = s.parse().map_err(|m: String| ModelError::schema(location, m))?;
    r.resolve(topology, location)
}

pub(crate) fn parse_mask<const N: usize>(s: &str, location: &str) -> Result<[bool; N], ModelError> {
    let s = s.trim();
    let bits: Vec<char> = s.chars().collect();
    if bits.len() != N || bits.iter().any(|c| *c != '0' && *c != '1') {
        return Err(ModelError::schema(
            location,
            format!("mask `{s}` must be {N} characters of 0/1"),
        ));
    }
    let mut mask = [false; N];
    for (m, c) in mask.iter_mut().zip(bits) {
        *m = c == '1';
    }
    Ok(mask)
}

pub(crate) fn emit_mask(mask: &[bool]) -> String {
    mask.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

fn convert_matrix<const N: usize>(m: &RawMatrix, location: &str) -> Result<SMatrix<f64, N, N>, ModelError> {
    match m {
        RawMatrix::Diagonal(d) => {
            if d.len() != N {
                return Err(ModelError::schema(location, format!("diagonal needs {N} entries")));
            }
            let mut out = SMatrix::<f64, N, N>::zeros();
            for (i, v) in d.iter().enumerate() {
                out[(i, i)] = *v;
            }
            Ok(out)
        }
        RawMatrix::Full(rows) => {
            if rows.len() != N || rows.iter().any(|r| r.len() != N) {
                return Err(ModelError::schema(location, format!("full matrix must be {N}x{N}")));
            }
            Ok(SMatrix::<f64, N, N>::from_fn(|r, c| rows[r][c]))
        }
    }
}

fn emit_matrix<const N: usize>(m: &SMatrix<f64, N, N>) -> RawMatrix {
    let diagonal = (0..N).all(|r| (0..N).all(|c| r == c || m[(r, c)] == 0.0));
    if diagonal {
        RawMatrix::Diagonal((0..N).map(|i| m[(i, i)]).collect())
    } else {
        RawMatrix::Full((0..N).map(|r| (0..N).map(|c| m[(r, c)]).collect()).collect())
    }
}

fn optional_pose(p: &Option<RawPose>, location: &str) -> Result<Pose, ModelError> {
    match p {
        Some(p) => convert_pose(p, location),
        None => Ok(Pose::identity()),
    }
}

fn convert_pose(p: &RawPose, location: &str) -> Result<Pose, ModelError> {
    let result = match p {
        RawPose::Matrix { matrix } => {
            let flat: Vec<f64> = match matrix {
                RawPoseMatrix::Rows(rows) => {
                    if rows.len() != 4 || rows.iter().any(|r| r.len() != 4) {
                        return Err(ModelError::schema(location, "pose matrix must be 4x4"));
                    }
                    rows.iter().flatten().copied().collect()
                }
                RawPoseMatrix::Flat(v) => v.clone(),
            };
            if flat.len() != 16 {
                return Err(ModelError::schema(location, "pose matrix needs 16 entries"));
            }
            Pose::from_matrix(&nalgebra::Matrix4::from_row_slice(&flat))
        }
        RawPose::TranslationQuaternion {
            translation,
            quaternion,
        } => Pose::from_translation_quaternion(Vector3::from_column_slice(translation), *quaternion),
    };
    result.map_err(|e| ModelError::schema(location, e.to_string()))
}

fn emit_pose(p: &Pose) -> RawPose {
    let m = p.matrix();
    RawPose::Matrix {
        matrix: RawPoseMatrix::Rows((0..4).map(|r| (0..4).map(|c| m[(r, c)]).collect()).collect()),
    }
}
