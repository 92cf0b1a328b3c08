//! Measurement and ground-truth tables.
//!
//! One record per line, comma separated, `#` starts a comment line:
//!
//! ```text
//! pose,<target>,<16 row-major pose entries>,<6-bit mask>[,<6 covariance diagonal entries>]
//! fbg,robot:<i>:<node>,<4 strains>,<4-bit mask>[,<4 covariance diagonal entries>]
//! truth,robot:<i>:<node>,<16 pose entries>,<6 strain entries>
//! truth,body:<i>,<16 pose entries>
//! ```

use std::fmt::Write as _;

use nalgebra::{Matrix4, SMatrix, Vector4};

use super::config::{emit_mask, parse_mask};
use super::{
    Endpoint, EndpointRef, FbgMeasurement, MeasurementSet, ModelError, NodeState, PoseMeasurement,
    SystemState, SystemTopology,
};
use crate::liegroup::{Pose, Strain6};

/// Non-blank, non-comment lines as `(line number, fields)`.
fn records(text: &str) -> impl Iterator<Item = Result<(usize, csv::StringRecord), ModelError>> + '_ {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| {
            let mut reader = csv::ReaderBuilder::new()
                .has_headers(false)
                .flexible(true)
                .trim(csv::Trim::All)
                .from_reader(l.as_bytes());
            let mut record = csv::StringRecord::new();
            match reader.read_record(&mut record) {
                Ok(_) => Ok((i + 1, record)),
                Err(e) => Err(ModelError::schema(format!("line {}", i + 1), e.to_string())),
            }
        })
}

struct Fields<'a> {
    record: &'a csv::StringRecord,
    next: usize,
    location: String,
}

impl<'a> Fields<'a> {
    fn new(line: usize, record: &'a csv::StringRecord) -> Self {
        Self {
            record,
            next: 0,
            location: format!("line {line}"),
        }
    }

    fn text(&mut self, what: &str) -> Result<&'a str, ModelError> {
        let v = self
            .record
            .get(self.next)
            .ok_or_else(|| ModelError::schema(&self.location, format!("missing {what}")))?;
        self.next += 1;
        Ok(v)
    }

    fn numbers(&mut self, n: usize, what: &str) -> Result<Vec<f64>, ModelError> {
        (0..n)
            .map(|i| {
                let t = self.text(what)?;
                t.parse::<f64>().map_err(|_| {
                    ModelError::schema(&self.location, format!("{what} entry {i}: `{t}` is not a number"))
                })
            })
            .collect()
    }

    fn remaining(&self) -> usize {
        self.record.len() - self.next
    }

    fn target(&mut self, topology: &SystemTopology) -> Result<Endpoint, ModelError> {
        let t = self.text("target")?;
        let r: EndpointRef = t.parse().map_err(|m: String| ModelError::schema(&self.location, m))?;
        r.resolve(topology, &self.location)
    }

    fn pose(&mut self) -> Result<Pose, ModelError> {
        let v = self.numbers(16, "pose")?;
        Pose::from_matrix(&Matrix4::from_row_slice(&v))
            .map_err(|e| ModelError::schema(&self.location, e.to_string()))
    }

    fn optional_diagonal<const N: usize>(&mut self) -> Result<Option<SMatrix<f64, N, N>>, ModelError> {
        match self.remaining() {
            0 => Ok(None),
            r if r == N => {
                let d = self.numbers(N, "covariance")?;
                let mut m = SMatrix::<f64, N, N>::zeros();
                for (i, v) in d.into_iter().enumerate() {
                    m[(i, i)] = v;
                }
                Ok(Some(m))
            }
            r => Err(ModelError::schema(
                &self.location,
                format!("expected 0 or {N} covariance entries, found {r}"),
            )),
        }
    }

    fn finish(&self) -> Result<(), ModelError> {
        if self.remaining() > 0 {
            return Err(ModelError::schema(&self.location, "unexpected trailing fields"));
        }
        Ok(())
    }
}

pub fn measurements_from_csv(text: &str, topology: &SystemTopology) -> Result<MeasurementSet, ModelError> {
    let mut set = MeasurementSet::default();
    for record in records(text) {
        let (line, record) = record?;
        let mut f = Fields::new(line, &record);
        match f.text("kind")? {
            "pose" => {
                let target = f.target(topology)?;
                let pose = f.pose()?;
                let mask = parse_mask::<6>(f.text("mask")?, &f.location)?;
                let covariance = f.optional_diagonal::<6>()?;
                set.pose.push(PoseMeasurement {
                    target,
                    pose,
                    mask,
                    covariance,
                });
            }
            "fbg" => {
                let (robot, node) = match f.target(topology)? {
                    Endpoint::RobotNode { robot, node } => (robot, node),
                    Endpoint::Body(_) => {
                        return Err(ModelError::schema(&f.location, "fbg target must be a robot node"))
                    }
                };
                let strains = Vector4::from_vec(f.numbers(4, "strains")?);
                let mask = parse_mask::<4>(f.text("mask")?, &f.location)?;
                let covariance = f.optional_diagonal::<4>()?;
                set.fbg.push(FbgMeasurement {
                    robot,
                    node,
                    strains,
                    mask,
                    covariance,
                });
            }
            other => {
                return Err(ModelError::schema(
                    &f.location,
                    format!("unknown measurement kind `{other}` (pose | fbg)"),
                ))
            }
        }
    }
    Ok(set)
}

fn push_numbers(out: &mut String, values: impl IntoIterator<Item = f64>) {
    for v in values {
        write!(out, ",{v}").unwrap();
    }
}

fn push_pose(out: &mut String, p: &Pose) {
    let m = p.matrix();
    push_numbers(out, (0..4).flat_map(|r| (0..4).map(move |c| m[(r, c)])));
}

fn diagonal_of<const N: usize>(m: &SMatrix<f64, N, N>, what: &str) -> Result<Vec<f64>, ModelError> {
    if (0..N).any(|r| (0..N).any(|c| r != c && m[(r, c)] != 0.0)) {
        return Err(ModelError::schema(what, "only diagonal per-record covariances can be written"));
    }
    Ok((0..N).map(|i| m[(i, i)]).collect())
}

pub fn measurements_to_csv(set: &MeasurementSet) -> Result<String, ModelError> {
    let mut out = String::from("# kind,target,payload...,mask[,covariance diagonal...]\n");
    for m in &set.pose {
        write!(out, "pose,{}", m.target).unwrap();
        push_pose(&mut out, &m.pose);
        write!(out, ",{}", emit_mask(&m.mask)).unwrap();
        if let Some(c) = &m.covariance {
            push_numbers(&mut out, diagonal_of(c, &format!("pose {}", m.target))?);
        }
        out.push('\n');
    }
    for m in &set.fbg {
        write!(out, "fbg,robot:{}:{}", m.robot, m.node).unwrap();
        push_numbers(&mut out, m.strains.iter().copied());
        write!(out, ",{}", emit_mask(&m.mask)).unwrap();
        if let Some(c) = &m.covariance {
            push_numbers(&mut out, diagonal_of(c, &format!("fbg robot:{}:{}", m.robot, m.node))?);
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn truth_to_csv(state: &SystemState) -> String {
    let mut out = String::from("# truth,target,16 pose entries[,6 strain entries]\n");
    for (r, nodes) in state.robots.iter().enumerate() {
        for (k, n) in nodes.iter().enumerate() {
            write!(out, "truth,robot:{r}:{k}").unwrap();
            push_pose(&mut out, &n.pose);
            push_numbers(&mut out, n.strain.iter().copied());
            out.push('\n');
        }
    }
    for (b, pose) in state.bodies.iter().enumerate() {
        write!(out, "truth,body:{b}").unwrap();
        push_pose(&mut out, pose);
        out.push('\n');
    }
    out
}

/// Reads a truth table; every node and body of `topology` must appear exactly once.
pub fn truth_from_csv(text: &str, topology: &SystemTopology) -> Result<SystemState, ModelError> {
    let mut robots: Vec<Vec<Option<NodeState>>> =
        topology.robots.iter().map(|r| vec![None; r.node_count()]).collect();
    let mut bodies: Vec<Option<Pose>> = vec![None; topology.bodies.len()];
    for record in records(text) {
        let (line, record) = record?;
        let mut f = Fields::new(line, &record);
        let kind = f.text("kind")?;
        if kind != "truth" {
            return Err(ModelError::schema(&f.location, format!("expected `truth`, found `{kind}`")));
        }
        let target = f.target(topology)?;
        let pose = f.pose()?;
        let duplicate = match target {
            Endpoint::RobotNode { robot, node } => {
                let strain = Strain6::from_vec(f.numbers(6, "strain")?);
                robots[robot][node].replace(NodeState { pose, strain }).is_some()
            }
            Endpoint::Body(b) => bodies[b].replace(pose).is_some(),
        };
        f.finish()?;
        if duplicate {
            return Err(ModelError::DuplicateMeasurement(format!("truth {target}")));
        }
    }
    let missing = |what: String| ModelError::schema("truth", format!("missing entry for {what}"));
    let robots = robots
        .into_iter()
        .enumerate()
        .map(|(r, nodes)| {
            nodes
                .into_iter()
                .enumerate()
                .map(|(k, n)| n.ok_or_else(|| missing(format!("robot:{r}:{k}"))))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    let bodies = bodies
        .into_iter()
        .enumerate()
        .map(|(b, p)| p.ok_or_else(|| missing(format!("body:{b}"))))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SystemState { robots, bodies })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liegroup::exp_se3;
    use crate::model::{RigidBody, RobotSpec};
    use nalgebra::{Matrix6, Vector6};

    fn topology() -> SystemTopology {
        SystemTopology {
            robots: vec![RobotSpec::uniform("a", 0.2, 3, Pose::identity())],
            bodies: vec![RigidBody { name: "ee".into(), initial_pose: None, fixed: false }],
            couplings: vec![],
        }
    }

    #[test]
    fn measurement_roundtrip_is_exact() {
        let t = topology();
        let set = MeasurementSet {
            pose: vec![
                PoseMeasurement {
                    target: Endpoint::Body(0),
                    pose: exp_se3(&Vector6::new(0.1, -0.2, 0.3, 0.4, 0.5, -0.6)),
                    mask: [true, true, true, false, false, false],
                    covariance: Some(Matrix6::from_diagonal(&Vector6::new(1e-6, 2e-6, 3e-6, 1.0, 1.0, 1.0))),
                },
                PoseMeasurement {
                    target: Endpoint::RobotNode { robot: 0, node: 2 },
                    pose: exp_se3(&Vector6::new(0.01, 0.0, 0.0, 0.0, 0.1 / 3.0, 0.0)),
                    mask: [true; 6],
                    covariance: None,
                },
            ],
            fbg: vec![FbgMeasurement {
                robot: 0,
                node: 1,
                strains: Vector4::new(1e-5, -3.3e-5, 7.0 / 3.0 * 1e-5, 0.0),
                mask: [true, true, false, true],
                covariance: None,
            }],
        };
        let text = measurements_to_csv(&set).unwrap();
        assert_eq!(measurements_from_csv(&text, &t).unwrap(), set);
    }

    #[test]
    fn malformed_records_report_line() {
        let t = topology();
        let err = measurements_from_csv("# c\nfbg,robot:0:1,1,2,3,x,1111\n", &t).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(measurements_from_csv("fbg,body:0,1,2,3,4,1111\n", &t).is_err());
        assert!(measurements_from_csv("fbg,robot:0:1,1,2,3,4,1111,1\n", &t).is_err());
        assert!(measurements_from_csv("gps,body:0\n", &t).is_err());
    }

    #[test]
    fn truth_roundtrip_and_completeness() {
        let t = topology();
        let state = SystemState {
            robots: vec![(0..3)
                .map(|k| NodeState {
                    pose: exp_se3(&Vector6::new(0.1 * k as f64, 0.0, 0.0, 0.0, 0.0, 0.3 * k as f64)),
                    strain: Strain6::new(1.0, 0.0, 0.0, 0.0, 0.0, 3.0),
                })
                .collect()],
            bodies: vec![Pose::from_translation(nalgebra::Vector3::new(0.2, 0.1, 0.0))],
        };
        let text = truth_to_csv(&state);
        assert_eq!(truth_from_csv(&text, &t).unwrap(), state);
        let truncated: String = text.lines().take(3).map(|l| format!("{l}\n")).collect();
        assert!(truth_from_csv(&truncated, &t).is_err());
    }
}
