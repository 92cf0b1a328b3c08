//! Plot-ready result tables of one estimation run.

use std::io;
use std::path::Path;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};

use cmrse::liegroup::{log_se3, Pose, Strain6};
use cmrse::model::{EstimationProblem, SystemState};
use cmrse::solver::{IterationRecord, PosteriorEstimate, SolveError, Timing};

#[derive(Clone, Debug, PartialEq)]
pub struct NodeRow {
    pub robot: usize,
    /// Estimation node index, or `None` for an interpolated row.
    pub node: Option<usize>,
    pub s: f64,
    /// Inertial position of the cross-section.
    pub position: Vector3<f64>,
    /// Orientation of the cross-section frame in inertial coordinates, `[w, x, y, z]`.
    pub quaternion: [f64; 4],
    pub strain: Strain6,
    pub position_3sigma: Vector3<f64>,
    pub strain_3sigma: Strain6,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BodyRow {
    pub body: usize,
    pub name: String,
    pub position: Vector3<f64>,
    pub quaternion: [f64; 4],
    pub position_3sigma: Vector3<f64>,
    /// Body-frame rotation perturbation, rad.
    pub rotation_3sigma: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorRow {
    pub target: String,
    pub s: Option<f64>,
    pub position_error: f64,
    pub orientation_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub nodes: Vec<NodeRow>,
    pub bodies: Vec<BodyRow>,
    pub errors: Vec<ErrorRow>,
    pub iterations: Vec<IterationRecord>,
    pub timing: Timing,
    pub converged: bool,
    pub final_cost: f64,
}

fn orientation(pose: &Pose) -> [f64; 4] {
    let q = UnitQuaternion::from_matrix(&pose.rotation().transpose());
    let s = if q.w < 0.0 { -1.0 } else { 1.0 };
    [s * q.w, s * q.i, s * q.j, s * q.k]
}

/// `3σ` of the inertial position given the covariance of the translational perturbation.
fn position_envelope(pose: &Pose, cov: &Matrix3<f64>) -> Vector3<f64> {
    let c = pose.rotation().transpose() * cov * pose.rotation();
    Vector3::from_fn(|i, _| 3.0 * c[(i, i)].max(0.0).sqrt())
}

fn pose_errors(estimate: &Pose, truth: &Pose) -> (f64, f64) {
    let rotation = log_se3(&(estimate * &truth.inverse())).fixed_rows::<3>(3).norm();
    ((estimate.origin() - truth.origin()).norm(), rotation)
}

impl RunReport {
    /// Tables for `est`; `interp` resamples robot rows at that arclength step, `truth` adds errors.
    pub fn build(
        problem: &EstimationProblem,
        est: &PosteriorEstimate,
        truth: Option<&SystemState>,
        interp: Option<f64>,
    ) -> Result<Self, SolveError> {
        let topology = &problem.topology;
        let mut nodes = Vec::new();
        let node_covs = est.node_covariances();
        for (r, spec) in topology.robots.iter().enumerate() {
            let mut push = |node: Option<usize>, s: f64, pose: Pose, strain: Strain6, cov: &dyn Fn(usize, usize) -> f64| {
                let p = Matrix3::from_fn(cov);
                nodes.push(NodeRow {
                    robot: r,
                    node,
                    s,
                    position: pose.origin(),
                    quaternion: orientation(&pose),
                    strain,
                    position_3sigma: position_envelope(&pose, &p),
                    strain_3sigma: Strain6::from_fn(|i, _| 3.0 * cov(6 + i, 6 + i).max(0.0).sqrt()),
                });
            };
            match interp {
                None => {
                    for (k, n) in est.mean.robots[r].iter().enumerate() {
                        let c = &node_covs[r][k];
                        push(Some(k), spec.node_arclengths[k], n.pose, n.strain, &|i, j| c[(i, j)]);
                    }
                }
                Some(step) => {
                    let count = (spec.length / step).round() as usize;
                    for i in 0..=count {
                        let s = (i as f64 * step).min(spec.length);
                        let q = est.interpolate(r, s)?;
                        let node = spec.node_arclengths.iter().position(|&a| a == s);
                        push(node, s, q.pose, q.strain, &|i, j| q.covariance[(i, j)]);
                    }
                    if (count as f64 * step) < spec.length {
                        let q = est.interpolate(r, spec.length)?;
                        push(Some(spec.tip()), spec.length, q.pose, q.strain, &|i, j| q.covariance[(i, j)]);
                    }
                }
            }
        }

        let body_covs = est.body_covariances();
        let bodies = topology
            .bodies
            .iter()
            .enumerate()
            .map(|(b, spec)| {
                let pose = &est.mean.bodies[b];
                let c = &body_covs[b];
                BodyRow {
                    body: b,
                    name: spec.name.clone(),
                    position: pose.origin(),
                    quaternion: orientation(pose),
                    position_3sigma: position_envelope(pose, &Matrix3::from_fn(|i, j| c[(i, j)])),
                    rotation_3sigma: Vector3::from_fn(|i, _| 3.0 * c[(3 + i, 3 + i)].max(0.0).sqrt()),
                }
            })
            .collect();

        let mut errors = Vec::new();
        if let Some(truth) = truth {
            for (r, spec) in topology.robots.iter().enumerate() {
                for (k, n) in est.mean.robots[r].iter().enumerate() {
                    let (p, o) = pose_errors(&n.pose, &truth.robots[r][k].pose);
                    errors.push(ErrorRow {
                        target: format!("robot:{r}:{k}"),
                        s: Some(spec.node_arclengths[k]),
                        position_error: p,
                        orientation_error: o,
                    });
                }
            }
            for (b, pose) in est.mean.bodies.iter().enumerate() {
                let (p, o) = pose_errors(pose, &truth.bodies[b]);
                errors.push(ErrorRow {
                    target: format!("body:{b}"),
                    s: None,
                    position_error: p,
                    orientation_error: o,
                });
            }
        }

        let d = &est.diagnostics;
        Ok(Self {
            nodes,
            bodies,
            errors,
            iterations: d.iterations.clone(),
            timing: d.timing,
            converged: d.converged,
            final_cost: d.final_cost,
        })
    }

    /// Position error of the first rigid body, or of the last robot's tip without bodies.
    pub fn end_effector_error(&self) -> Option<f64> {
        self.errors
            .iter()
            .find(|e| e.target == "body:0")
            .or_else(|| self.errors.iter().rev().find(|e| e.s.is_some()))
            .map(|e| e.position_error)
    }

    /// Writes `nodes.csv`, `bodies.csv`, `iterations.csv`, `timing.csv` and, with truth, `errors.csv`.
    pub fn write(&self, dir: &Path) -> io::Result<Vec<String>> {
        let mut written = Vec::new();
        let mut table = |name: &str, header: &[&str], rows: Vec<Vec<String>>| -> io::Result<()> {
            let mut w = csv::Writer::from_path(dir.join(name))?;
            w.write_record(header)?;
            for row in rows {
                w.write_record(&row)?;
            }
            w.flush()?;
            written.push(name.to_string());
            Ok(())
        };
        let num = |v: f64| v.to_string();

        table(
            "nodes.csv",
            &[
                "robot", "node", "s", "px", "py", "pz", "qw", "qx", "qy", "qz", "nu_x", "nu_y", "nu_z", "omega_x",
                "omega_y", "omega_z", "px_3sigma", "py_3sigma", "pz_3sigma", "nu_x_3sigma", "nu_y_3sigma",
                "nu_z_3sigma", "omega_x_3sigma", "omega_y_3sigma", "omega_z_3sigma",
            ],
            self.nodes
                .iter()
                .map(|n| {
                    let mut row = vec![n.robot.to_string(), n.node.map(|k| k.to_string()).unwrap_or_default(), num(n.s)];
                    row.extend(n.position.iter().map(|&v| num(v)));
                    row.extend(n.quaternion.iter().map(|&v| num(v)));
                    row.extend(n.strain.iter().map(|&v| num(v)));
                    row.extend(n.position_3sigma.iter().map(|&v| num(v)));
                    row.extend(n.strain_3sigma.iter().map(|&v| num(v)));
                    row
                })
                .collect(),
        )?;

        table(
            "bodies.csv",
            &[
                "body", "name", "px", "py", "pz", "qw", "qx", "qy", "qz", "px_3sigma", "py_3sigma", "pz_3sigma",
                "rx_3sigma", "ry_3sigma", "rz_3sigma",
            ],
            self.bodies
                .iter()
                .map(|b| {
                    let mut row = vec![b.body.to_string(), b.name.clone()];
                    row.extend(b.position.iter().map(|&v| num(v)));
                    row.extend(b.quaternion.iter().map(|&v| num(v)));
                    row.extend(b.position_3sigma.iter().map(|&v| num(v)));
                    row.extend(b.rotation_3sigma.iter().map(|&v| num(v)));
                    row
                })
                .collect(),
        )?;

        if !self.errors.is_empty() {
            table(
                "errors.csv",
                &["target", "s", "position_error", "orientation_error"],
                self.errors
                    .iter()
                    .map(|e| {
                        vec![
                            e.target.clone(),
                            e.s.map(num).unwrap_or_default(),
                            num(e.position_error),
                            num(e.orientation_error),
                        ]
                    })
                    .collect(),
            )?;
        }

        table(
            "iterations.csv",
            &["iteration", "cost", "step_norm", "alpha", "damped"],
            self.iterations
                .iter()
                .enumerate()
                .map(|(i, r)| vec![i.to_string(), num(r.cost), num(r.step_norm), num(r.alpha), r.damped.to_string()])
                .collect(),
        )?;

        let ms = |d: std::time::Duration| num(d.as_secs_f64() * 1e3);
        table(
            "timing.csv",
            &["phase", "ms", "tag"],
            vec![
                vec!["assembly".into(), ms(self.timing.assembly), "measured".into()],
                vec!["factorization".into(), ms(self.timing.factorization), "measured".into()],
                vec!["total".into(), ms(self.timing.total), "measured".into()],
            ],
        )?;
        Ok(written)
    }
}
