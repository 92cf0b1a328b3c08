//! Error terms and their analytic Jacobians.
//!
//! Every Jacobian is `∂e/∂δ` for the perturbations used by the solver: poses are perturbed on
//! the left, `T = exp(δ^) T_op`, and strains additively, `ε = ε_op + δε`. A robot-node block is
//! ordered `[δt; δε]` (12 columns), a rigid-body block is `δt` (6 columns).

pub mod check;

use nalgebra::{DMatrix, DVector, Matrix6, SMatrix, SVector, Vector4};
use thiserror::Error;

use crate::liegroup::{
    curly6, left_jacobian_inv, left_jacobian_inv_derivative, log_se3, Pose, Strain6, Twist,
};
use crate::model::{
    BlockId, Endpoint, EstimationProblem, FbgGeometry, PriorJacobianMode, SystemState,
};

pub type Matrix12 = SMatrix<f64, 12, 12>;
pub type Vector12 = SVector<f64, 12>;

/// `λ + 1` below this makes an FBG core measurement degenerate.
pub const FBG_DEGENERATE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FactorError {
    #[error("interval end {s} precedes start {s_prev}")]
    ReversedInterval { s: f64, s_prev: f64 },
    #[error("interval length {0} must be positive")]
    NonPositiveInterval(f64),
    #[error("fbg core {core} degenerate at {target} (λ + 1 = {value:e})")]
    DegenerateFbg { target: String, core: usize, value: f64 },
    #[error("{0}: covariance not positive definite on active rows")]
    NotSpd(String),
    #[error("robot {0} has no fbg geometry")]
    MissingFbgGeometry(usize),
}

/// `Φ(s, s') = [[I, (s − s') I], [0, I]]`.
pub fn transition(s: f64, s_prev: f64) -> Result<Matrix12, FactorError> {
    if s < s_prev {
        return Err(FactorError::ReversedInterval { s, s_prev });
    }
    Ok(transition_unchecked(s - s_prev))
}

pub(crate) fn transition_unchecked(ds: f64) -> Matrix12 {
    let mut phi = Matrix12::identity();
    for i in 0..6 {
        phi[(i, 6 + i)] = ds;
    }
    phi
}

/// `Q(ds) = [[ds³/3 Qc, ds²/2 Qc], [ds²/2 Qc, ds Qc]]`.
pub fn process_noise(ds: f64, qc: &Matrix6<f64>) -> Result<Matrix12, FactorError> {
    if !(ds > 0.0) {
        return Err(FactorError::NonPositiveInterval(ds));
    }
    Ok(process_noise_unchecked(ds, qc))
}

pub(crate) fn process_noise_unchecked(ds: f64, qc: &Matrix6<f64>) -> Matrix12 {
    let mut q = Matrix12::zeros();
    let c = ds * ds / 2.0 * qc;
    q.fixed_view_mut::<6, 6>(0, 0).copy_from(&(ds * ds * ds / 3.0 * qc));
    q.fixed_view_mut::<6, 6>(0, 6).copy_from(&c);
    q.fixed_view_mut::<6, 6>(6, 0).copy_from(&c);
    q.fixed_view_mut::<6, 6>(6, 6).copy_from(&(ds * qc));
    q
}

/// Constant-strain prior kernel for one robot.
#[derive(Clone, Debug)]
pub struct PriorKernel {
    qc: Matrix6<f64>,
    qc_inv: Matrix6<f64>,
}

impl PriorKernel {
    pub fn new(qc: Matrix6<f64>) -> Result<Self, FactorError> {
        let qc_inv = qc
            .cholesky()
            .ok_or_else(|| FactorError::NotSpd("Q_c".into()))?
            .inverse();
        Ok(Self { qc, qc_inv })
    }

    pub fn qc(&self) -> &Matrix6<f64> {
        &self.qc
    }

    pub fn covariance(&self, ds: f64) -> Result<Matrix12, FactorError> {
        process_noise(ds, &self.qc)
    }

    /// `Q(ds)⁻¹ = [[12/ds³, −6/ds²], [−6/ds², 4/ds]] ⊗ Q_c⁻¹`.
    pub fn information(&self, ds: f64) -> Result<Matrix12, FactorError> {
        if !(ds > 0.0) {
            return Err(FactorError::NonPositiveInterval(ds));
        }
        let mut w = Matrix12::zeros();
        let c = -6.0 / (ds * ds) * self.qc_inv;
        w.fixed_view_mut::<6, 6>(0, 0).copy_from(&(12.0 / (ds * ds * ds) * self.qc_inv));
        w.fixed_view_mut::<6, 6>(0, 6).copy_from(&c);
        w.fixed_view_mut::<6, 6>(6, 0).copy_from(&c);
        w.fixed_view_mut::<6, 6>(6, 6).copy_from(&(4.0 / ds * self.qc_inv));
        Ok(w)
    }
}

/// `[ξ − ds ε_{k−1}; J(ξ)⁻¹ ε_k − ε_{k−1}]` with `ξ = ln(T_k T_{k−1}⁻¹)`.
pub fn prior_error(t_k: &Pose, eps_k: &Strain6, t_km1: &Pose, eps_km1: &Strain6, ds: f64) -> Vector12 {
    let xi = log_se3(&(t_k * &t_km1.inverse()));
    let mut e = Vector12::zeros();
    e.fixed_rows_mut::<6>(0).copy_from(&(xi - ds * eps_km1));
    e.fixed_rows_mut::<6>(6)
        .copy_from(&(left_jacobian_inv(&xi) * eps_k - eps_km1));
    e
}

/// Prior Jacobian blocks with respect to node `k − 1` and node `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorJacobian {
    pub prev: Matrix12,
    pub next: Matrix12,
}

pub fn prior_jacobian(
    t_k: &Pose,
    eps_k: &Strain6,
    t_km1: &Pose,
    ds: f64,
    mode: PriorJacobianMode,
) -> PriorJacobian {
    let rel = t_k * &t_km1.inverse();
    let xi = log_se3(&rel);
    let j_inv = left_jacobian_inv(&xi);
    let j_inv_ad = j_inv * rel.adjoint();
    let d = match mode {
        PriorJacobianMode::Exact => left_jacobian_inv_derivative(&xi, eps_k),
        PriorJacobianMode::FirstOrder => 0.5 * curly6(eps_k),
    };
    let mut prev = Matrix12::zeros();
    prev.fixed_view_mut::<6, 6>(0, 0).copy_from(&(-j_inv_ad));
    prev.fixed_view_mut::<6, 6>(0, 6).copy_from(&(-ds * Matrix6::identity()));
    prev.fixed_view_mut::<6, 6>(6, 0).copy_from(&(-d * j_inv_ad));
    prev.fixed_view_mut::<6, 6>(6, 6).copy_from(&(-Matrix6::identity()));
    let mut next = Matrix12::zeros();
    next.fixed_view_mut::<6, 6>(0, 0).copy_from(&j_inv);
    next.fixed_view_mut::<6, 6>(6, 0).copy_from(&(d * j_inv));
    next.fixed_view_mut::<6, 6>(6, 6).copy_from(&j_inv);
    PriorJacobian { prev, next }
}

/// `ln(T T̃⁻¹)`.
pub fn pose_meas_error(t_op: &Pose, t_meas: &Pose) -> Twist {
    log_se3(&(t_op * &t_meas.inverse()))
}

/// Jacobian with respect to the pose perturbation; strain columns of a node block are zero.
pub fn pose_meas_jacobian(t_op: &Pose, t_meas: &Pose) -> Matrix6<f64> {
    left_jacobian_inv(&pose_meas_error(t_op, t_meas))
}

/// Longitudinal strains of the central core and the three outer cores.
pub fn fbg_model(eps: &Strain6, geometry: &FbgGeometry) -> Vector4<f64> {
    let r = geometry.core_radius;
    let mut lambda = Vector4::zeros();
    lambda[0] = eps[0] - 1.0;
    for (i, theta) in geometry.core_angles.iter().enumerate() {
        let g1 = eps[0] - r * (eps[5] * theta.cos() - eps[4] * theta.sin());
        let g2 = r * eps[3];
        lambda[i + 1] = (g1 * g1 + g2 * g2).sqrt() - 1.0;
    }
    lambda
}

/// `ỹ − g(ε)`.
pub fn fbg_error(y_meas: &Vector4<f64>, eps: &Strain6, geometry: &FbgGeometry) -> Vector4<f64> {
    y_meas - fbg_model(eps, geometry)
}

/// `[0, −∂g/∂ε]` (4×12).
pub fn fbg_jacobian(eps: &Strain6, geometry: &FbgGeometry) -> Result<SMatrix<f64, 4, 12>, FactorError> {
    let r = geometry.core_radius;
    let mut jac = SMatrix::<f64, 4, 12>::zeros();
    jac[(0, 6)] = -1.0;
    for (i, theta) in geometry.core_angles.iter().enumerate() {
        let (s, c) = theta.sin_cos();
        let g1 = eps[0] - r * (eps[5] * c - eps[4] * s);
        let g2 = r * eps[3];
        let norm = (g1 * g1 + g2 * g2).sqrt();
        if norm < FBG_DEGENERATE {
            return Err(FactorError::DegenerateFbg {
                target: String::new(),
                core: i + 1,
                value: norm,
            });
        }
        let row = i + 1;
        jac[(row, 6)] = -g1 / norm;
        jac[(row, 9)] = -r * g2 / norm;
        jac[(row, 10)] = -r * s * g1 / norm;
        jac[(row, 11)] = r * c * g1 / norm;
    }
    Ok(jac)
}

/// `ln(T_{c1g}⁻¹ T_a T_b⁻¹ T_{c2g})`.
pub fn coupling_error(t_a: &Pose, t_b: &Pose, offset_a: &Pose, offset_b: &Pose) -> Twist {
    log_se3(&(offset_a.inverse() * *t_a * t_b.inverse() * *offset_b))
}

/// Jacobians with respect to the pose perturbations of `a` and `b`.
pub fn coupling_jacobian(
    t_a: &Pose,
    t_b: &Pose,
    offset_a: &Pose,
    offset_b: &Pose,
) -> (Matrix6<f64>, Matrix6<f64>) {
    let left = offset_a.inverse();
    let j_inv = left_jacobian_inv(&coupling_error(t_a, t_b, offset_a, offset_b));
    let e1 = j_inv * left.adjoint();
    let e2 = -j_inv * (left * *t_a * t_b.inverse()).adjoint();
    (e1, e2)
}

/// Which factor family an evaluation belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FactorKind {
    Prior,
    Pose,
    Fbg,
    Coupling,
}

impl FactorKind {
    pub fn name(&self) -> &'static str {
        match self {
            FactorKind::Prior => "prior",
            FactorKind::Pose => "pose",
            FactorKind::Fbg => "fbg",
            FactorKind::Coupling => "coupling",
        }
    }
}

/// Linearized factor restricted to its active rows.
#[derive(Clone, Debug)]
pub struct FactorEvaluation {
    pub kind: FactorKind,
    pub error: DVector<f64>,
    /// Jacobian with respect to each involved state block (rows match `error`).
    pub jacobians: Vec<(BlockId, DMatrix<f64>)>,
    /// Inverse covariance on the active rows.
    pub information: DMatrix<f64>,
}

impl FactorEvaluation {
    /// `½ eᵀ W e`.
    pub fn cost(&self) -> f64 {
        0.5 * self.error.dot(&(&self.information * &self.error))
    }

    /// Active rows of a full-size error, Jacobians and covariance; the information is the
    /// inverse of the active covariance sub-block.
    fn masked<const R: usize>(
        kind: FactorKind,
        error: &SVector<f64, R>,
        jacobians: Vec<(BlockId, DMatrix<f64>)>,
        covariance: &SMatrix<f64, R, R>,
        mask: &[bool],
        label: impl FnOnce() -> String,
    ) -> Result<Self, FactorError> {
        let rows: Vec<usize> = (0..R).filter(|&i| mask[i]).collect();
        let n = rows.len();
        let sub = DMatrix::from_fn(n, n, |a, b| covariance[(rows[a], rows[b])]);
        let information = if n == 0 {
            DMatrix::zeros(0, 0)
        } else {
            sub.cholesky().ok_or_else(|| FactorError::NotSpd(label()))?.inverse()
        };
        Ok(Self {
            kind,
            error: DVector::from_fn(n, |i, _| error[rows[i]]),
            jacobians: jacobians
                .into_iter()
                .map(|(b, j)| (b, DMatrix::from_fn(n, j.ncols(), |r, c| j[(rows[r], c)])))
                .collect(),
            information,
        })
    }
}

fn block_of(e: &Endpoint) -> BlockId {
    match *e {
        Endpoint::RobotNode { robot, node } => BlockId::Node { robot, node },
        Endpoint::Body(b) => BlockId::Body(b),
    }
}

/// Pose Jacobian padded with zero strain columns when `e` is a robot node.
fn pose_block(e: &Endpoint, jac: &Matrix6<f64>) -> (BlockId, DMatrix<f64>) {
    let block = block_of(e);
    let mut m = DMatrix::zeros(6, block.dim());
    m.view_mut((0, 0), (6, 6)).copy_from(jac);
    (block, m)
}

/// Linearizes every factor of `problem` at `state`.
pub fn evaluate_all(problem: &EstimationProblem, state: &SystemState) -> Result<Vec<FactorEvaluation>, FactorError> {
    let topology = &problem.topology;
    let mode = problem.hyper.solver.prior_jacobian;
    let mut out = Vec::new();

    for (r, spec) in topology.robots.iter().enumerate() {
        let kernel = PriorKernel::new(problem.robot_qc(r))?;
        let nodes = &state.robots[r];
        for k in 1..spec.node_count() {
            let ds = spec.node_arclengths[k] - spec.node_arclengths[k - 1];
            let (a, b) = (&nodes[k - 1], &nodes[k]);
            let e = prior_error(&b.pose, &b.strain, &a.pose, &a.strain, ds);
            let j = prior_jacobian(&b.pose, &b.strain, &a.pose, ds, mode);
            out.push(FactorEvaluation {
                kind: FactorKind::Prior,
                error: DVector::from_column_slice(e.as_slice()),
                jacobians: vec![
                    (BlockId::Node { robot: r, node: k - 1 }, DMatrix::from_column_slice(12, 12, j.prev.as_slice())),
                    (BlockId::Node { robot: r, node: k }, DMatrix::from_column_slice(12, 12, j.next.as_slice())),
                ],
                information: DMatrix::from_column_slice(12, 12, kernel.information(ds)?.as_slice()),
            });
        }
    }

    for m in &problem.measurements.pose {
        let t = state.pose(&m.target);
        let e = pose_meas_error(t, &m.pose);
        let j = left_jacobian_inv(&e);
        out.push(FactorEvaluation::masked(
            FactorKind::Pose,
            &e,
            vec![pose_block(&m.target, &j)],
            &problem.pose_covariance(m),
            &m.mask,
            || format!("pose measurement on {}", m.target),
        )?);
    }

    for m in &problem.measurements.fbg {
        let geometry = topology.robots[m.robot]
            .fbg
            .as_ref()
            .ok_or(FactorError::MissingFbgGeometry(m.robot))?;
        let eps = &state.robots[m.robot][m.node].strain;
        let target = || format!("robot:{}:{}", m.robot, m.node);
        let e = fbg_error(&m.strains, eps, geometry);
        let j = fbg_jacobian(eps, geometry).map_err(|err| match err {
            FactorError::DegenerateFbg { core, value, .. } => FactorError::DegenerateFbg {
                target: target(),
                core,
                value,
            },
            other => other,
        })?;
        out.push(FactorEvaluation::masked(
            FactorKind::Fbg,
            &e,
            vec![(
                BlockId::Node { robot: m.robot, node: m.node },
                DMatrix::from_column_slice(4, 12, j.as_slice()),
            )],
            &problem.fbg_covariance(m),
            &m.mask,
            || format!("fbg measurement on {}", target()),
        )?);
    }

    for (i, c) in topology.couplings.iter().enumerate() {
        let (ta, tb) = (state.pose(&c.a), state.pose(&c.b));
        let e = coupling_error(ta, tb, &c.offset_a, &c.offset_b);
        let (ja, jb) = coupling_jacobian(ta, tb, &c.offset_a, &c.offset_b);
        out.push(FactorEvaluation::masked(
            FactorKind::Coupling,
            &e,
            vec![pose_block(&c.a, &ja), pose_block(&c.b, &jb)],
            &c.covariance,
            &c.dof_mask,
            || format!("coupling {i}"),
        )?);
    }
    Ok(out)
}

/// Total cost `J = ½ Σ eᵀ W e` at `state`.
pub fn total_cost(problem: &EstimationProblem, state: &SystemState) -> Result<f64, FactorError> {
    Ok(evaluate_all(problem, state)?.iter().map(FactorEvaluation::cost).sum())
}

/// `sqrt(eᵀ W e)` for each coupling, in declaration order.
pub fn coupling_residuals(problem: &EstimationProblem, state: &SystemState) -> Result<Vec<f64>, FactorError> {
    Ok(evaluate_all(problem, state)?
        .iter()
        .filter(|f| f.kind == FactorKind::Coupling)
        .map(|f| (2.0 * f.cost()).sqrt())
        .collect())
}
