//! SE(3) / se(3) primitives.
//!
//! Twists and strains are 6-vectors ordered `[translation-part; rotation-part]`,
//! i.e. `[ν; ω]`. Every function in this crate uses that ordering.
//!
//! Poses are body-from-inertial transforms and are perturbed on the left:
//! `T = exp(δ^) T_op`.

use nalgebra::{Matrix3, Matrix4, Matrix6, Vector3, Vector6};
use thiserror::Error;

/// A 6-vector in se(3), `[ν; ω]`.
pub type Twist = Vector6<f64>;

/// Cosserat strain `[ν; ω]`: translational strain (unitless) then rotational strain (rad/m).
pub type Strain6 = Vector6<f64>;

/// Below this rotation angle exp/log switch to their series forms.
pub const EXP_LOG_SMALL_ANGLE: f64 = 1e-8;

/// Below this rotation angle the SE(3) Jacobians are evaluated from their power series.
pub const JACOBIAN_SMALL_ANGLE: f64 = 1e-2;

const ORTHONORMAL_TOL: f64 = 1e-9;
const SKEW_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LieError {
    #[error("matrix is not in se(3): deviation {0:e}")]
    NotInAlgebra(f64),
    #[error("rotation block is not orthonormal: deviation {0:e}")]
    NotOrthonormal(f64),
    #[error("rotation block has determinant {0}")]
    Reflection(f64),
    #[error("bottom row of homogeneous transform must be [0 0 0 1]")]
    BadBottomRow,
    #[error("quaternion has zero norm")]
    ZeroQuaternion,
    #[error("non-finite entry in pose")]
    NonFinite,
}

/// Nominal strain of an undeformed rod whose length runs along its local x-axis.
pub fn nominal_strain() -> Strain6 {
    Strain6::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0)
}

#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[inline]
fn translation_part(x: &Vector6<f64>) -> Vector3<f64> {
    Vector3::new(x[0], x[1], x[2])
}

#[inline]
fn rotation_part(x: &Vector6<f64>) -> Vector3<f64> {
    Vector3::new(x[3], x[4], x[5])
}

/// The `∧` operator on 6-vectors: `[[ω^, ν], [0, 0]]`.
pub fn hat6(x: &Vector6<f64>) -> Matrix4<f64> {
    let mut m = Matrix4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&skew(&rotation_part(x)));
    m.fixed_view_mut::<3, 1>(0, 3)
        .copy_from(&translation_part(x));
    m
}

/// Inverse of [`hat6`]. Rejects matrices whose rotation block is not skew or whose
/// last row is non-zero.
pub fn vee6(m: &Matrix4<f64>) -> Result<Twist, LieError> {
    let r = m.fixed_view::<3, 3>(0, 0);
    let mut deviation = (r + r.transpose()).amax();
    for i in 0..3 {
        deviation = deviation.max(r[(i, i)].abs());
    }
    for j in 0..4 {
        deviation = deviation.max(m[(3, j)].abs());
    }
    if !deviation.is_finite() || deviation > SKEW_TOL {
        return Err(LieError::NotInAlgebra(deviation));
    }
    Ok(Twist::new(
        m[(0, 3)],
        m[(1, 3)],
        m[(2, 3)],
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    ))
}

/// The `⋏` operator: `[[ω^, ν^], [0, ω^]]`. Satisfies `curly6(a) b = −curly6(b) a`.
pub fn curly6(x: &Vector6<f64>) -> Matrix6<f64> {
    let w = skew(&rotation_part(x));
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&w);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&w);
    m.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&skew(&translation_part(x)));
    m
}

/// Rigid transform in SE(3).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Builds a pose from a rotation block, checking orthonormality and handedness.
    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, LieError> {
        if rotation.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(LieError::NonFinite);
        }
        let deviation = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if deviation > ORTHONORMAL_TOL {
            return Err(LieError::NotOrthonormal(deviation));
        }
        let det = rotation.determinant();
        if det < 0.0 {
            return Err(LieError::Reflection(det));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Result<Self, LieError> {
        if m[(3, 0)] != 0.0 || m[(3, 1)] != 0.0 || m[(3, 2)] != 0.0 || m[(3, 3)] != 1.0 {
            return Err(LieError::BadBottomRow);
        }
        Self::from_parts(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    /// Builds a pose from a translation and a `[w, x, y, z]` quaternion (normalized here).
    pub fn from_translation_quaternion(
        translation: Vector3<f64>,
        wxyz: [f64; 4],
    ) -> Result<Self, LieError> {
        let norm = wxyz.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(LieError::NonFinite);
        }
        if norm < 1e-12 {
            return Err(LieError::ZeroQuaternion);
        }
        let q = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            wxyz[0] / norm,
            wxyz[1] / norm,
            wxyz[2] / norm,
            wxyz[3] / norm,
        ));
        Self::from_parts(q.to_rotation_matrix().into_inner(), translation)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Origin of the frame this pose maps into, expressed in the reference frame (`−Cᵀ r`).
    /// For a robot pose `T_{bi}` this is the inertial position of the node.
    pub fn origin(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Pose `T_{bi}` of a body frame given its orientation `R_{ib}` and origin in the reference frame.
    pub fn from_frame(rotation_ib: &Matrix3<f64>, origin: &Vector3<f64>) -> Result<Self, LieError> {
        Self::from_parts(rotation_ib.transpose(), -(rotation_ib.transpose() * origin))
    }

    /// Unit quaternion `[w, x, y, z]` of the rotation block with `w ≥ 0`.
    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let q = nalgebra::UnitQuaternion::from_matrix(&self.rotation);
        let s = if q.w < 0.0 { -1.0 } else { 1.0 };
        [s * q.w, s * q.i, s * q.j, s * q.k]
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Applies the transform to a point.
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `[[R, p^ R], [0, R]]`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&self.rotation);
        ad.fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(skew(&self.translation) * self.rotation));
        ad
    }

    /// Projects the rotation block back onto SO(3) (nearest rotation in Frobenius norm).
    pub fn reorthonormalized(&self) -> Self {
        Self {
            rotation: nearest_rotation(&self.rotation),
            translation: self.translation,
        }
    }

    /// Left-multiplicative update `exp(δ^) T`, re-orthonormalized.
    pub fn perturbed(&self, delta: &Twist) -> Self {
        exp_se3(delta).compose(self).reorthonormalized()
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl std::ops::Mul<&Pose> for &Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut d = Matrix3::identity();
        d[(2, 2)] = -1.0;
        r = u * d * v_t;
    }
    r
}

/// Free-function alias of [`Pose::adjoint`].
pub fn adjoint(t: &Pose) -> Matrix6<f64> {
    t.adjoint()
}

/// `sin(φ)/φ` and `(1 − cos φ)/φ²`, stable for every φ.
fn rodrigues_coefficients(angle: f64) -> (f64, f64) {
    if angle < EXP_LOG_SMALL_ANGLE {
        let a2 = angle * angle;
        (1.0 - a2 / 6.0, 0.5 - a2 / 24.0)
    } else {
        let half = 0.5 * angle;
        let sinc_half = half.sin() / half;
        (angle.sin() / angle, 0.5 * sinc_half * sinc_half)
    }
}

fn so3_exp(phi: &Vector3<f64>) -> Matrix3<f64> {
    let angle = phi.norm();
    let (a, b) = rodrigues_coefficients(angle);
    let w = skew(phi);
    Matrix3::identity() + a * w + b * w * w
}

/// SO(3) left Jacobian coefficients `(1 − cos φ)/φ²` and `(φ − sin φ)/φ³`.
fn so3_jacobian_coefficients(angle: f64) -> (f64, f64) {
    if angle < JACOBIAN_SMALL_ANGLE {
        let a2 = angle * angle;
        (
            0.5 - a2 / 24.0 + a2 * a2 / 720.0 - a2 * a2 * a2 / 40320.0,
            1.0 / 6.0 - a2 / 120.0 + a2 * a2 / 5040.0 - a2 * a2 * a2 / 362880.0,
        )
    } else {
        let (_, b) = rodrigues_coefficients(angle);
        (b, (angle - angle.sin()) / (angle * angle * angle))
    }
}

/// Coefficient of `φ^ φ^` in the inverse SO(3) left Jacobian.
fn so3_jacobian_inv_coefficient(angle: f64) -> f64 {
    if angle < JACOBIAN_SMALL_ANGLE {
        let a2 = angle * angle;
        1.0 / 12.0 + a2 / 720.0 + a2 * a2 / 30240.0 + a2 * a2 * a2 / 1209600.0
    } else {
        let half = 0.5 * angle;
        (1.0 - half / half.tan()) / (angle * angle)
    }
}

fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let (a, b) = so3_jacobian_coefficients(phi.norm());
    let w = skew(phi);
    Matrix3::identity() + a * w + b * w * w
}

fn so3_left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let c = so3_jacobian_inv_coefficient(phi.norm());
    let w = skew(phi);
    Matrix3::identity() - 0.5 * w + c * w * w
}

fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let s = 0.5
        * Vector3::new(
            r[(2, 1)] - r[(1, 2)],
            r[(0, 2)] - r[(2, 0)],
            r[(1, 0)] - r[(0, 1)],
        );
    let c = (0.5 * (r.trace() - 1.0)).clamp(-1.0, 1.0);
    let sin = s.norm();
    let angle = sin.atan2(c);
    if angle < EXP_LOG_SMALL_ANGLE {
        return s * (1.0 + angle * angle / 6.0);
    }
    if c > -0.9 {
        return s * (angle / sin);
    }
    // Near π the skew part vanishes; recover the axis from the symmetric part
    // (R + Rᵀ)/2 − cI = (1 − c) a aᵀ.
    let b = 0.5 * (r + r.transpose()) - c * Matrix3::identity();
    let j = (0..3)
        .max_by(|&i, &k| b[(i, i)].total_cmp(&b[(k, k)]))
        .unwrap();
    let mut axis: Vector3<f64> = b.column(j).into_owned() / (b[(j, j)] * (1.0 - c)).sqrt();
    axis /= axis.norm();
    if axis.dot(&s) < 0.0 {
        axis = -axis;
    }
    angle * axis
}

/// Exponential map se(3) → SE(3).
pub fn exp_se3(x: &Twist) -> Pose {
    let phi = rotation_part(x);
    let rho = translation_part(x);
    Pose {
        rotation: so3_exp(&phi),
        translation: so3_left_jacobian(&phi) * rho,
    }
}

/// Logarithm SE(3) → se(3), with rotation angle in `[0, π]`.
pub fn log_se3(t: &Pose) -> Twist {
    let phi = so3_log(&t.rotation);
    let rho = so3_left_jacobian_inv(&phi) * t.translation;
    let mut x = Twist::zeros();
    x.fixed_rows_mut::<3>(0).copy_from(&rho);
    x.fixed_rows_mut::<3>(3).copy_from(&phi);
    x
}

/// Off-diagonal block `Q(ρ, φ)` of the SE(3) left Jacobian.
fn se3_q_block(rho: &Vector3<f64>, phi: &Vector3<f64>) -> Matrix3<f64> {
    let angle = phi.norm();
    let p = skew(phi);
    let r = skew(rho);
    let a2 = angle * angle;
    let (c3, c4, c5) = if angle < JACOBIAN_SMALL_ANGLE {
        (
            1.0 / 6.0 - a2 / 120.0 + a2 * a2 / 5040.0,
            1.0 / 24.0 - a2 / 720.0 + a2 * a2 / 40320.0,
            1.0 / 120.0 - a2 / 2520.0 + a2 * a2 / 120960.0,
        )
    } else {
        let (s, c) = angle.sin_cos();
        let half_sin = (0.5 * angle).sin();
        (
            (angle - s) / (a2 * angle),
            (angle - 2.0 * half_sin) * (angle + 2.0 * half_sin) / (2.0 * a2 * a2),
            (2.0 * angle - 3.0 * s + angle * c) / (2.0 * a2 * a2 * angle),
        )
    };
    let pr = p * r;
    let rp = r * p;
    let prp = pr * p;
    0.5 * r
        + c3 * (pr + rp + prp)
        + c4 * (p * pr + rp * p - 3.0 * prp)
        + c5 * (prp * p + p * prp)
}

/// Left Jacobian of SE(3).
pub fn left_jacobian(x: &Twist) -> Matrix6<f64> {
    let phi = rotation_part(x);
    if phi.norm() < JACOBIAN_SMALL_ANGLE {
        return left_jacobian_series(x);
    }
    let rho = translation_part(x);
    let j = so3_left_jacobian(&phi);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    out.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&se3_q_block(&rho, &phi));
    out
}

/// Inverse of the SE(3) left Jacobian.
pub fn left_jacobian_inv(x: &Twist) -> Matrix6<f64> {
    let phi = rotation_part(x);
    if phi.norm() < JACOBIAN_SMALL_ANGLE {
        return left_jacobian_inv_series(x);
    }
    let rho = translation_part(x);
    let j_inv = so3_left_jacobian_inv(&phi);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j_inv);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j_inv);
    out.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(-j_inv * se3_q_block(&rho, &phi) * j_inv));
    out
}

const SERIES_TERMS: usize = 10;

/// `Σ (x⋏)ⁿ / (n+1)!`, used near zero rotation.
fn left_jacobian_series(x: &Twist) -> Matrix6<f64> {
    let ad = curly6(x);
    let mut term = Matrix6::identity();
    let mut sum = Matrix6::identity();
    for n in 1..=SERIES_TERMS {
        term = term * ad / (n as f64 + 1.0);
        sum += term;
    }
    sum
}

/// Bernoulli numbers B₀..B₁₀.
const BERNOULLI: [f64; 11] = [
    1.0,
    -0.5,
    1.0 / 6.0,
    0.0,
    -1.0 / 30.0,
    0.0,
    1.0 / 42.0,
    0.0,
    -1.0 / 30.0,
    0.0,
    5.0 / 66.0,
];

/// `Σ Bₙ/n! (x⋏)ⁿ`, used near zero rotation.
fn left_jacobian_inv_series(x: &Twist) -> Matrix6<f64> {
    let ad = curly6(x);
    let mut power = Matrix6::identity();
    let mut factorial = 1.0;
    let mut sum = Matrix6::identity();
    for (n, b) in BERNOULLI.iter().enumerate().skip(1) {
        power *= ad;
        factorial *= n as f64;
        if *b != 0.0 {
            sum += power * (*b / factorial);
        }
    }
    sum
}

const DERIVATIVE_MAX_TERMS: usize = 80;

/// Derivative of `J(x) w` with respect to `x`, for fixed `w`.
///
/// Uses `J(x) = Σ (x⋏)ⁿ/(n+1)!` (an entire series) and
/// `∂[(x⋏)ⁿ w]/∂x = −Σⱼ (x⋏)ʲ ((x⋏)ⁿ⁻¹⁻ʲ w)⋏`.
pub fn left_jacobian_derivative(x: &Twist, w: &Vector6<f64>) -> Matrix6<f64> {
    let ad = curly6(x);
    let mut u = *w;
    let mut m = curly6(&u);
    let mut coeff = 0.5;
    let mut sum = -coeff * m;
    for n in 1..DERIVATIVE_MAX_TERMS {
        u = ad * u;
        m = curly6(&u) + ad * m;
        coeff /= n as f64 + 2.0;
        let term = -coeff * m;
        sum += term;
        if n > 4 && term.amax() <= 1e-18 * (1.0 + sum.amax()) {
            break;
        }
    }
    sum
}

/// Derivative of `J(x)⁻¹ v` with respect to `x`, for fixed `v`.
pub fn left_jacobian_inv_derivative(x: &Twist, v: &Vector6<f64>) -> Matrix6<f64> {
    let j_inv = left_jacobian_inv(x);
    -j_inv * left_jacobian_derivative(x, &(j_inv * v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_twist(rng: &mut ChaCha8Rng, max_angle: f64) -> Twist {
        let rho = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let dir = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalize();
        let phi = dir * rng.random_range(0.0..max_angle);
        let mut x = Twist::zeros();
        x.fixed_rows_mut::<3>(0).copy_from(&rho);
        x.fixed_rows_mut::<3>(3).copy_from(&phi);
        x
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        exp_se3(&random_twist(rng, 3.0))
    }

    /// Independent reference: truncated matrix-exponential series of hat6(x).
    fn expm_series(x: &Twist) -> Matrix4<f64> {
        let a = hat6(x);
        let mut term = Matrix4::identity();
        let mut sum = Matrix4::identity();
        for n in 1..60 {
            term = term * a / n as f64;
            sum += term;
        }
        sum
    }

    #[test]
    fn hat_vee_trivial_cases() {
        assert_eq!(hat6(&Twist::zeros()), Matrix4::zeros());
        let m = hat6(&Twist::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0));
        let mut expected = Matrix4::zeros();
        expected[(0, 3)] = 1.0;
        assert_eq!(m, expected);
        assert_eq!(vee6(&Matrix4::zeros()).unwrap(), Twist::zeros());
        assert_eq!(vee6(&expected).unwrap(), Twist::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn hat_vee_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let x = random_twist(&mut rng, 3.0);
            assert_eq!(vee6(&hat6(&x)).unwrap(), x);
            assert_eq!(hat6(&vee6(&hat6(&x)).unwrap()), hat6(&x));
        }
    }

    #[test]
    fn vee_rejects_non_skew() {
        let mut m = hat6(&Twist::new(0.0, 0.0, 0.0, 0.1, 0.2, 0.3));
        m[(0, 1)] += 1e-6;
        assert!(matches!(vee6(&m), Err(LieError::NotInAlgebra(_))));
        let mut m = Matrix4::zeros();
        m[(3, 3)] = 1.0;
        assert!(vee6(&m).is_err());
    }

    #[test]
    fn curly_trivial_and_antisymmetry() {
        assert_eq!(curly6(&Twist::zeros()), Matrix6::zeros());
        let c = curly6(&Twist::new(0.0, 0.0, 0.0, 0.0, 0.0, 1.0));
        let ez = skew(&Vector3::z());
        assert_eq!(c.fixed_view::<3, 3>(0, 0).into_owned(), ez);
        assert_eq!(c.fixed_view::<3, 3>(3, 3).into_owned(), ez);
        assert_eq!(c.fixed_view::<3, 3>(0, 3).into_owned(), Matrix3::zeros());

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let a = random_twist(&mut rng, 3.0);
            let b = random_twist(&mut rng, 3.0);
            assert!((curly6(&a) * b + curly6(&b) * a).amax() < 1e-14);
            // (a⋏ b)^ equals the matrix commutator [a^, b^].
            let bracket = hat6(&a) * hat6(&b) - hat6(&b) * hat6(&a);
            assert!((hat6(&(curly6(&a) * b)) - bracket).amax() < 1e-14);
        }
    }

    #[test]
    fn exp_trivial_cases() {
        assert_eq!(exp_se3(&Twist::zeros()), Pose::identity());
        let t = exp_se3(&Twist::new(0.3, -0.2, 0.1, 0.0, 0.0, 0.0));
        assert_eq!(*t.rotation(), Matrix3::identity());
        assert!((t.translation() - Vector3::new(0.3, -0.2, 0.1)).amax() < 1e-15);
        assert_eq!(log_se3(&Pose::identity()), Twist::zeros());
        let x = log_se3(&Pose::from_translation(Vector3::new(0.3, -0.2, 0.1)));
        assert!((x - Twist::new(0.3, -0.2, 0.1, 0.0, 0.0, 0.0)).amax() < 1e-15);
    }

    #[test]
    fn exp_matches_matrix_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let x = random_twist(&mut rng, 3.1);
            assert!((exp_se3(&x).matrix() - expm_series(&x)).amax() < 1e-12);
        }
    }

    #[test]
    fn exp_log_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let x = random_twist(&mut rng, std::f64::consts::PI - 1e-3);
            let y = log_se3(&exp_se3(&x));
            assert!((x - y).amax() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn log_at_exactly_pi() {
        let axis = Vector3::new(1.0, 2.0, -0.5).normalize();
        let phi = axis * std::f64::consts::PI;
        let x = Twist::new(0.1, 0.2, 0.3, phi.x, phi.y, phi.z);
        let y = log_se3(&exp_se3(&x));
        let back = exp_se3(&y);
        assert!((back.matrix() - exp_se3(&x).matrix()).amax() < 1e-9);
        assert!((rotation_part(&y).norm() - std::f64::consts::PI).abs() < 1e-9);
    }

    #[test]
    fn small_angle_continuity() {
        let dir = Vector3::new(0.3, -0.5, 0.8).normalize();
        let rho = Vector3::new(0.7, -0.2, 0.4);
        for &threshold in &[EXP_LOG_SMALL_ANGLE, JACOBIAN_SMALL_ANGLE, 1e-6] {
            for &scale in &[1.0 - 1e-9, 1.0 + 1e-9] {
                let phi = dir * threshold * scale;
                let x = Twist::new(rho.x, rho.y, rho.z, phi.x, phi.y, phi.z);
                assert!((exp_se3(&x).matrix() - expm_series(&x)).amax() < 1e-14);
                assert!((log_se3(&exp_se3(&x)) - x).amax() < 1e-12);
                assert!((left_jacobian(&x) - left_jacobian_series(&x)).amax() < 1e-10);
                assert!((left_jacobian_inv(&x) - left_jacobian_inv_series(&x)).amax() < 1e-10);
            }
        }
    }

    #[test]
    fn adjoint_cases() {
        assert_eq!(Pose::identity().adjoint(), Matrix6::identity());
        let r = exp_se3(&Twist::new(0.0, 0.0, 0.0, 0.4, -0.1, 0.7));
        let ad = r.adjoint();
        assert!((ad.fixed_view::<3, 3>(0, 3)).amax() < 1e-15);
        assert_eq!(ad.fixed_view::<3, 3>(0, 0), ad.fixed_view::<3, 3>(3, 3));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let t = random_pose(&mut rng);
            let x = random_twist(&mut rng, 3.0);
            let lhs = t.adjoint() * x;
            let rhs = vee6(&(t.matrix() * hat6(&x) * t.inverse().matrix())).unwrap();
            assert!((lhs - rhs).amax() < 1e-10);

            let t2 = random_pose(&mut rng);
            assert!(((t * t2).adjoint() - t.adjoint() * t2.adjoint()).amax() < 1e-10);
        }
    }

    #[test]
    fn jacobian_inverse_pair() {
        assert_eq!(left_jacobian(&Twist::zeros()), Matrix6::identity());
        assert_eq!(left_jacobian_inv(&Twist::zeros()), Matrix6::identity());
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..500 {
            let x = random_twist(&mut rng, 3.0);
            assert!((left_jacobian(&x) * left_jacobian_inv(&x) - Matrix6::identity()).amax() < 1e-9);
            assert!((left_jacobian(&x) - left_jacobian_series_long(&x)).amax() < 1e-10);
        }
    }

    fn left_jacobian_series_long(x: &Twist) -> Matrix6<f64> {
        let ad = curly6(x);
        let mut term = Matrix6::identity();
        let mut sum = Matrix6::identity();
        for n in 1..80 {
            term = term * ad / (n as f64 + 1.0);
            sum += term;
        }
        sum
    }

    #[test]
    fn jacobian_finite_difference() {
        // d/dt log(exp((x + tδ)^) exp(x^)⁻¹) at t = 0 equals J(x) δ.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = 1e-6;
        for _ in 0..200 {
            let x = random_twist(&mut rng, 2.5);
            let d = random_twist(&mut rng, 1.0);
            let base_inv = exp_se3(&x).inverse();
            let plus = log_se3(&(exp_se3(&(x + h * d)) * base_inv));
            let minus = log_se3(&(exp_se3(&(x - h * d)) * base_inv));
            let fd = (plus - minus) / (2.0 * h);
            let analytic = left_jacobian(&x) * d;
            assert!((fd - analytic).amax() < 1e-6 * (1.0 + analytic.amax()));
        }
    }

    #[test]
    fn jacobian_derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = 1e-6;
        for _ in 0..200 {
            let x = random_twist(&mut rng, 2.5);
            let v = random_twist(&mut rng, 2.0);
            let analytic = left_jacobian_derivative(&x, &v);
            let analytic_inv = left_jacobian_inv_derivative(&x, &v);
            for i in 0..6 {
                let mut dx = Twist::zeros();
                dx[i] = h;
                let fd = (left_jacobian(&(x + dx)) * v - left_jacobian(&(x - dx)) * v) / (2.0 * h);
                let fd_inv =
                    (left_jacobian_inv(&(x + dx)) * v - left_jacobian_inv(&(x - dx)) * v) / (2.0 * h);
                assert!((fd - analytic.column(i)).amax() < 1e-6 * (1.0 + fd.amax()));
                assert!((fd_inv - analytic_inv.column(i)).amax() < 1e-6 * (1.0 + fd_inv.amax()));
            }
        }
    }

    #[test]
    fn derivative_at_zero_is_half_curly() {
        let v = Twist::new(1.0, 0.1, -0.2, 0.5, 3.0, -2.0);
        let d = left_jacobian_inv_derivative(&Twist::zeros(), &v);
        assert!((d - 0.5 * curly6(&v)).amax() < 1e-15);
    }

    #[test]
    fn reorthonormalization_and_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = random_pose(&mut rng);
        let mut m = t.matrix();
        m[(0, 0)] += 1e-7;
        assert!(matches!(Pose::from_matrix(&m), Err(LieError::NotOrthonormal(_))));
        let noisy = Pose {
            rotation: m.fixed_view::<3, 3>(0, 0).into_owned(),
            translation: *t.translation(),
        };
        let fixed = noisy.reorthonormalized();
        assert!(Pose::from_matrix(&fixed.matrix()).is_ok());
        assert!((fixed.matrix() - t.matrix()).amax() < 1e-6);

        let mut bad = Matrix4::identity();
        bad[(3, 0)] = 1e-12;
        assert_eq!(Pose::from_matrix(&bad), Err(LieError::BadBottomRow));
        let mut refl = Matrix4::identity();
        refl[(2, 2)] = -1.0;
        assert!(matches!(Pose::from_matrix(&refl), Err(LieError::Reflection(_))));
    }

    #[test]
    fn quaternion_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..50 {
            let t = random_pose(&mut rng);
            let q = t.quaternion_wxyz();
            let back = Pose::from_translation_quaternion(*t.translation(), q).unwrap();
            assert!((back.matrix() - t.matrix()).amax() < 1e-12);
        }
        assert_eq!(
            Pose::from_translation_quaternion(Vector3::zeros(), [0.0; 4]),
            Err(LieError::ZeroQuaternion)
        );
    }

    proptest::proptest! {
        #[test]
        fn prop_roundtrip(
            rho in proptest::array::uniform3(-2.0f64..2.0),
            axis in proptest::array::uniform3(-1.0f64..1.0),
            angle in 0.0f64..(std::f64::consts::PI - 1e-3),
        ) {
            let a = Vector3::from(axis);
            proptest::prop_assume!(a.norm() > 1e-3);
            let phi = a.normalize() * angle;
            let x = Twist::new(rho[0], rho[1], rho[2], phi.x, phi.y, phi.z);
            proptest::prop_assert!((log_se3(&exp_se3(&x)) - x).amax() < 1e-9);
        }
    }
}
