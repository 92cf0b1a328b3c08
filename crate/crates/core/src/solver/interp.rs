//! Continuous queries of the posterior between estimation nodes.

use nalgebra::{DMatrix, SMatrix};

use super::{PosteriorEstimate, SolveError};
use crate::factors::{process_noise_unchecked, transition_unchecked, Matrix12, Vector12};
use crate::liegroup::{
    exp_se3, left_jacobian, left_jacobian_derivative, left_jacobian_inv, left_jacobian_inv_derivative, log_se3,
    Pose, Strain6, Twist,
};
use crate::model::BlockId;

/// Mean and covariance of the state at an arbitrary arclength.
#[derive(Clone, Debug, PartialEq)]
pub struct Interpolated {
    pub pose: Pose,
    pub strain: Strain6,
    /// 12×12, ordered `[pose; strain]`.
    pub covariance: Matrix12,
}

fn to_matrix12(m: &DMatrix<f64>) -> Matrix12 {
    Matrix12::from_iterator(m.iter().copied())
}

impl PosteriorEstimate {
    /// Posterior state of `robot` at arclength `s`.
    pub fn interpolate(&self, robot: usize, s: f64) -> Result<Interpolated, SolveError> {
        let (arclengths, qc) = self.robots.get(robot).ok_or(SolveError::UnknownRobot(robot))?;
        let length = *arclengths.last().expect("robots have nodes");
        if !(arclengths[0]..=length).contains(&s) {
            return Err(SolveError::OutOfRange { robot, s, length });
        }
        let k = arclengths.partition_point(|&a| a <= s).saturating_sub(1);
        let nodes = &self.mean.robots[robot];
        let at = BlockId::Node { robot, node: k };
        if s == arclengths[k] || k + 1 == arclengths.len() {
            return Ok(Interpolated {
                pose: nodes[k].pose,
                strain: nodes[k].strain,
                covariance: to_matrix12(&self.covariance(&at)),
            });
        }
        let next = BlockId::Node { robot, node: k + 1 };
        let (a, b) = (&nodes[k], &nodes[k + 1]);
        let dt = arclengths[k + 1] - s;
        let tau = s - arclengths[k];
        let delta = arclengths[k + 1] - arclengths[k];

        let q_tau = process_noise_unchecked(tau, qc);
        let q_inv = process_noise_unchecked(delta, qc)
            .try_inverse()
            .expect("process noise is SPD for positive intervals");
        let psi = q_tau * transition_unchecked(dt).transpose() * q_inv;
        let lambda = transition_unchecked(tau) - psi * transition_unchecked(delta);

        let rel = b.pose * a.pose.inverse();
        let xi = log_se3(&rel);
        let j_inv = left_jacobian_inv(&xi);
        let mut g_k = Vector12::zeros();
        g_k.fixed_rows_mut::<6>(6).copy_from(&a.strain);
        let mut g_next = Vector12::zeros();
        g_next.fixed_rows_mut::<6>(0).copy_from(&xi);
        g_next.fixed_rows_mut::<6>(6).copy_from(&(j_inv * b.strain));
        let g = lambda * g_k + psi * g_next;
        let xi_s: Twist = g.fixed_rows::<6>(0).into_owned();
        let psi_s: Twist = g.fixed_rows::<6>(6).into_owned();
        let j_s = left_jacobian(&xi_s);

        // Local-variable sensitivities to the perturbations of both nodes.
        let mut dg_k = SMatrix::<f64, 12, 24>::zeros();
        dg_k.fixed_view_mut::<6, 6>(6, 6).copy_from(&nalgebra::Matrix6::identity());
        let j_inv_ad = j_inv * rel.adjoint();
        let d = left_jacobian_inv_derivative(&xi, &b.strain);
        let mut dg_next = SMatrix::<f64, 12, 24>::zeros();
        dg_next.fixed_view_mut::<6, 6>(0, 0).copy_from(&(-j_inv_ad));
        dg_next.fixed_view_mut::<6, 6>(0, 12).copy_from(&j_inv);
        dg_next.fixed_view_mut::<6, 6>(6, 0).copy_from(&(-d * j_inv_ad));
        dg_next.fixed_view_mut::<6, 6>(6, 12).copy_from(&(d * j_inv));
        dg_next.fixed_view_mut::<6, 6>(6, 18).copy_from(&j_inv);
        let dg = lambda * dg_k + psi * dg_next;

        // Map local perturbations back to the global pose/strain perturbation at s.
        let mut out_local = Matrix12::zeros();
        out_local.fixed_view_mut::<6, 6>(0, 0).copy_from(&j_s);
        out_local.fixed_view_mut::<6, 6>(6, 0).copy_from(&left_jacobian_derivative(&xi_s, &psi_s));
        out_local.fixed_view_mut::<6, 6>(6, 6).copy_from(&j_s);
        let mut jac = out_local * dg;
        let exp_xi = exp_se3(&xi_s);
        let mut top = jac.fixed_view_mut::<6, 6>(0, 0);
        top += exp_xi.adjoint();

        let cov_k = self.covariance(&at);
        let cov_next = self.covariance(&next);
        let cross = self.cross_covariance(&at, &next);
        let mut joint = SMatrix::<f64, 24, 24>::zeros();
        joint.fixed_view_mut::<12, 12>(0, 0).copy_from(&to_matrix12(&cov_k));
        joint.fixed_view_mut::<12, 12>(12, 12).copy_from(&to_matrix12(&cov_next));
        let c = to_matrix12(&cross);
        joint.fixed_view_mut::<12, 12>(0, 12).copy_from(&c);
        joint.fixed_view_mut::<12, 12>(12, 0).copy_from(&c.transpose());

        let q_cond = q_tau - q_tau * transition_unchecked(dt).transpose() * q_inv * transition_unchecked(dt) * q_tau;
        let mut covariance = jac * joint * jac.transpose() + out_local * q_cond * out_local.transpose();
        covariance = 0.5 * (covariance + covariance.transpose());

        Ok(Interpolated {
            pose: (exp_xi * a.pose).reorthonormalized(),
            strain: j_s * psi_s,
            covariance,
        })
    }
}
