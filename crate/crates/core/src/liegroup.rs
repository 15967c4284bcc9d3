//! Group primitives for SO(3), SE2(3) and the tangent set of 5x5 navigation
//! generators, plus unit-quaternion interconversion.
//!
//! A navigation state `X` embeds as
//!
//! ```text
//!     | R  P  V |
//! X = | 0  1  0 |
//!     | 0  0  1 |
//! ```
//!
//! and a generator `u([w]x, v, a, k)` as
//!
//! ```text
//!     | [w]x  v  a |
//! U = |  0    0  0 |
//!     |  0    k  0 |
//! ```

use std::ops::Mul;

use nalgebra::{Matrix3, Matrix5, SymmetricEigen, Vector3};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Mat5 = Matrix5<f64>;

/// Tolerance used to accept a 3x3 matrix as a member of SO(3).
pub const ROTATION_TOL: f64 = 1e-9;
/// Tolerance used by [`vex`] to accept a matrix as antisymmetric.
pub const ANTISYM_TOL: f64 = 1e-9;
/// Quaternions farther than this from unit norm are rejected by [`quat_to_rot`].
pub const QUAT_NORM_TOL: f64 = 1e-6;
/// Largest Frobenius distance to SO(3) accepted by [`reorthonormalize`].
pub const REORTHO_MAX_DISTANCE: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LieError {
    #[error("matrix is not antisymmetric (max |M + M^T| = {0:e})")]
    NotAntisymmetric(f64),
    #[error("matrix is not a rotation (orthogonality error {orthogonality:e}, det {det})")]
    NotRotation { orthogonality: f64, det: f64 },
    #[error("quaternion is not unit norm (norm {0})")]
    NotUnitQuaternion(f64),
    #[error("matrix is {0:e} away from SO(3), refusing to project")]
    TooFarFromRotation(f64),
    #[error("5x5 matrix is not a navigation matrix: bottom rows must be [0 0 0 1 0] and [0 0 0 0 1]")]
    NotNavMatrix,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// `[x]x`, the matrix with `skew(x) * y == x.cross(y)`.
pub fn skew(x: &Vec3) -> Mat3 {
    Mat3::new(0.0, -x.z, x.y, x.z, 0.0, -x.x, -x.y, x.x, 0.0)
}

/// Inverse of [`skew`]. Rejects matrices that are not antisymmetric within [`ANTISYM_TOL`].
pub fn vex(m: &Mat3) -> Result<Vec3, LieError> {
    let asym = (m + m.transpose()).abs().max();
    if !asym.is_finite() {
        return Err(LieError::NonFinite("vex input"));
    }
    if asym > ANTISYM_TOL {
        return Err(LieError::NotAntisymmetric(asym));
    }
    Ok(vex_unchecked(m))
}

fn vex_unchecked(m: &Mat3) -> Vec3 {
    Vec3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// `(M - M^T) / 2`.
pub fn antisym_project(m: &Mat3) -> Mat3 {
    (m - m.transpose()) * 0.5
}

/// `vex(antisym_project(M))`.
pub fn upsilon(m: &Mat3) -> Vec3 {
    vex_unchecked(&antisym_project(m))
}

/// Normalized attitude distance `Tr(I - R) / 4`, in `[0, 1]`.
pub fn attitude_distance(r: &Rotation) -> f64 {
    0.25 * (3.0 - r.0.trace())
}

/// Element of SO(3). The inner matrix is guaranteed orthonormal only when built
/// through [`Rotation::new`], [`reorthonormalize`] or the closed-form constructors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Mat3);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Mat3::identity())
    }

    /// Validates `R^T R = I` and `det R = +1` within [`ROTATION_TOL`].
    pub fn new(m: Mat3) -> Result<Self, LieError> {
        let orth = (m.transpose() * m - Mat3::identity()).norm();
        let det = m.determinant();
        if !orth.is_finite() || !det.is_finite() {
            return Err(LieError::NonFinite("rotation"));
        }
        if orth > ROTATION_TOL || (det - 1.0).abs() > ROTATION_TOL {
            return Err(LieError::NotRotation { orthogonality: orth, det });
        }
        Ok(Rotation(m))
    }

    /// Wraps a matrix without checking it. Intended for intermediate stages of
    /// external integrators where orthonormality only holds approximately.
    pub fn from_matrix_unchecked(m: Mat3) -> Self {
        Rotation(m)
    }

    /// Rodrigues formula for the rotation vector `phi`.
    pub fn exp(phi: &Vec3) -> Self {
        let theta = phi.norm();
        let k = skew(phi);
        let (a, b) = if theta < 1e-5 {
            let t2 = theta * theta;
            (1.0 - t2 / 6.0 + t2 * t2 / 120.0, 0.5 - t2 / 24.0 + t2 * t2 / 720.0)
        } else {
            (theta.sin() / theta, (1.0 - theta.cos()) / (theta * theta))
        };
        Rotation(Mat3::identity() + k * a + k * k * b)
    }

    pub fn about_axis(axis: &Vec3, angle: f64) -> Self {
        Self::exp(&(axis.normalize() * angle))
    }

    /// `Rz(yaw) * Ry(pitch) * Rx(roll)`.
    pub fn from_euler_zyx(roll: f64, pitch: f64, yaw: f64) -> Self {
        Self::about_axis(&Vec3::z(), yaw)
            * Self::about_axis(&Vec3::y(), pitch)
            * Self::about_axis(&Vec3::x(), roll)
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul<Vec3> for Rotation {
    type Output = Vec3;
    fn mul(self, rhs: Vec3) -> Vec3 {
        self.0 * rhs
    }
}

impl Mul<&Vec3> for &Rotation {
    type Output = Vec3;
    fn mul(self, rhs: &Vec3) -> Vec3 {
        self.0 * rhs
    }
}

/// Nearest rotation in the Frobenius sense (polar factor). Inputs farther than
/// [`REORTHO_MAX_DISTANCE`] from SO(3) are rejected.
pub fn reorthonormalize(m: &Mat3) -> Result<Rotation, LieError> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(LieError::NonFinite("reorthonormalize input"));
    }
    // Polar factor R = M (M^T M)^{-1/2}, via the eigen-decomposition of M^T M.
    let eig = SymmetricEigen::new(m.transpose() * m);
    if eig.eigenvalues.min() <= 0.0 {
        return Err(LieError::TooFarFromRotation(f64::INFINITY));
    }
    let inv_sqrt = Mat3::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    let r = m * eig.eigenvectors * inv_sqrt * eig.eigenvectors.transpose();
    if r.determinant() <= 0.0 {
        return Err(LieError::TooFarFromRotation(f64::INFINITY));
    }
    let dist = (m - r).norm();
    if dist > REORTHO_MAX_DISTANCE {
        return Err(LieError::TooFarFromRotation(dist));
    }
    Ok(Rotation(r))
}

/// Unit quaternion `[q0, q]` with Hamilton product.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub v: Vec3,
}

impl Quaternion {
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quaternion { w, v: Vec3::new(x, y, z) }
    }

    pub fn identity() -> Self {
        Self::new(1.0, 0.0, 0.0, 0.0)
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.v.norm_squared()).sqrt()
    }

    pub fn normalized(&self) -> Self {
        let n = self.norm();
        Quaternion { w: self.w / n, v: self.v / n }
    }

    pub fn conjugate(&self) -> Self {
        Quaternion { w: self.w, v: -self.v }
    }

    /// Unit quaternion of the rotation vector `phi` (rotation by `|phi|` about `phi`).
    pub fn from_rotation_vector(phi: &Vec3) -> Self {
        let theta = phi.norm();
        let half = 0.5 * theta;
        let s = if theta < 1e-6 {
            0.5 - theta * theta / 48.0
        } else {
            half.sin() / theta
        };
        Quaternion { w: half.cos(), v: phi * s }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.w, self.v.x, self.v.y, self.v.z]
    }
}

impl Mul for Quaternion {
    type Output = Quaternion;
    fn mul(self, rhs: Quaternion) -> Quaternion {
        Quaternion {
            w: self.w * rhs.w - self.v.dot(&rhs.v),
            v: rhs.v * self.w + self.v * rhs.w + self.v.cross(&rhs.v),
        }
    }
}

/// `(q0^2 - |q|^2) I + 2 q q^T + 2 q0 [q]x`.
pub fn quat_to_rot(q: &Quaternion) -> Result<Rotation, LieError> {
    let n = q.norm();
    if !n.is_finite() {
        return Err(LieError::NonFinite("quaternion"));
    }
    if (n - 1.0).abs() > QUAT_NORM_TOL {
        return Err(LieError::NotUnitQuaternion(n));
    }
    let m = Mat3::identity() * (q.w * q.w - q.v.norm_squared())
        + q.v * q.v.transpose() * 2.0
        + skew(&q.v) * (2.0 * q.w);
    Ok(Rotation(m))
}

/// Inverse of [`quat_to_rot`] on the `q0 >= 0` half of the double cover.
pub fn rot_to_quat(r: &Rotation) -> Quaternion {
    let m = &r.0;
    let tr = m.trace();
    // Branch on the largest of (q0^2, qx^2, qy^2, qz^2) for conditioning.
    let q = if tr > m[(0, 0)].max(m[(1, 1)]).max(m[(2, 2)]) {
        let s = (1.0 + tr).sqrt() * 2.0;
        Quaternion::new(
            0.25 * s,
            (m[(2, 1)] - m[(1, 2)]) / s,
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(1, 0)] - m[(0, 1)]) / s,
        )
    } else if m[(0, 0)] >= m[(1, 1)] && m[(0, 0)] >= m[(2, 2)] {
        let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
        Quaternion::new(
            (m[(2, 1)] - m[(1, 2)]) / s,
            0.25 * s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
        )
    } else if m[(1, 1)] >= m[(2, 2)] {
        let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
        Quaternion::new(
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            0.25 * s,
            (m[(1, 2)] + m[(2, 1)]) / s,
        )
    } else {
        let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
        Quaternion::new(
            (m[(1, 0)] - m[(0, 1)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
            (m[(1, 2)] + m[(2, 1)]) / s,
            0.25 * s,
        )
    };
    let q = q.normalized();
    if q.w < 0.0 {
        Quaternion { w: -q.w, v: -q.v }
    } else {
        q
    }
}

/// Element of SE2(3): attitude, position and velocity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NavState {
    pub rotation: Rotation,
    pub position: Vec3,
    pub velocity: Vec3,
}

impl NavState {
    pub fn new(rotation: Rotation, position: Vec3, velocity: Vec3) -> Self {
        NavState { rotation, position, velocity }
    }

    pub fn identity() -> Self {
        NavState::new(Rotation::identity(), Vec3::zeros(), Vec3::zeros())
    }

    pub fn to_matrix(&self) -> Mat5 {
        let mut x = Mat5::identity();
        x.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rotation.matrix());
        x.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.position);
        x.fixed_view_mut::<3, 1>(0, 4).copy_from(&self.velocity);
        x
    }

    /// Strict inverse of [`NavState::to_matrix`]: the bottom rows must be exact and
    /// the rotation block valid.
    pub fn from_matrix(x: &Mat5) -> Result<Self, LieError> {
        let bottom_ok = (0..5).all(|j| {
            x[(3, j)] == if j == 3 { 1.0 } else { 0.0 } && x[(4, j)] == if j == 4 { 1.0 } else { 0.0 }
        });
        if !bottom_ok {
            return Err(LieError::NotNavMatrix);
        }
        let rotation = Rotation::new(x.fixed_view::<3, 3>(0, 0).into_owned())?;
        Ok(NavState::new(
            rotation,
            x.fixed_view::<3, 1>(0, 3).into_owned(),
            x.fixed_view::<3, 1>(0, 4).into_owned(),
        ))
    }

    /// Reads the top three rows of `x`, projecting the rotation block onto SO(3).
    /// The bottom rows are ignored.
    pub fn from_top_rows(x: &Mat5) -> Result<Self, LieError> {
        let rotation = reorthonormalize(&x.fixed_view::<3, 3>(0, 0).into_owned())?;
        Ok(NavState::new(
            rotation,
            x.fixed_view::<3, 1>(0, 3).into_owned(),
            x.fixed_view::<3, 1>(0, 4).into_owned(),
        ))
    }

    /// Group product, equal to the product of the 5x5 embeddings.
    pub fn compose(&self, other: &NavState) -> NavState {
        let r = self.rotation.matrix();
        NavState::new(
            self.rotation * other.rotation,
            r * other.position + self.position,
            r * other.velocity + self.velocity,
        )
    }

    /// `(R^T, -R^T P, -R^T V)`.
    pub fn inverse(&self) -> NavState {
        let rt = self.rotation.transpose();
        NavState::new(rt, -(rt * self.position), -(rt * self.velocity))
    }
}

/// Generator `u([omega]x, v_slot, a_slot, kappa)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TangentElement {
    pub omega: Vec3,
    pub v_slot: Vec3,
    pub a_slot: Vec3,
    pub kappa: f64,
}

impl TangentElement {
    pub fn new(omega: Vec3, v_slot: Vec3, a_slot: Vec3, kappa: f64) -> Self {
        TangentElement { omega, v_slot, a_slot, kappa }
    }

    pub fn zero() -> Self {
        Self::new(Vec3::zeros(), Vec3::zeros(), Vec3::zeros(), 0.0)
    }

    pub fn to_matrix(&self) -> Mat5 {
        let mut u = Mat5::zeros();
        u.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&self.omega));
        u.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.v_slot);
        u.fixed_view_mut::<3, 1>(0, 4).copy_from(&self.a_slot);
        u[(4, 3)] = self.kappa;
        u
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::new(self.omega * s, self.v_slot * s, self.a_slot * s, self.kappa * s)
    }
}

/// Matrix exponential of `U * dt` on the dense 5x5 embedding.
pub fn exp_um(u: &TangentElement, dt: f64) -> Mat5 {
    expm5(&(u.to_matrix() * dt))
}

/// Scaling-and-squaring Taylor exponential. Nilpotent inputs of degree <= 3 are
/// summed exactly.
pub fn expm5(a: &Mat5) -> Mat5 {
    let a2 = a * a;
    let a3 = a2 * a;
    if a3.iter().all(|&x| x == 0.0) {
        return Mat5::identity() + a + a2 * 0.5;
    }
    let norm = a.norm();
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let scaled = a / 2f64.powi(squarings);
    let mut sum = Mat5::identity();
    let mut term = Mat5::identity();
    for k in 1..=30 {
        term = term * scaled / k as f64;
        sum += term;
        if term.norm() <= f64::EPSILON * 1e-3 * sum.norm() {
            break;
        }
    }
    for _ in 0..squarings {
        sum = sum * sum;
    }
    sum
}

/// Closed-form block decomposition of `exp(u dt)`: returns `(Phi, p, q)` with
/// `Phi = exp([omega]x dt)` the rotation block, `p` the fourth column and `q` the
/// fifth column of the top three rows. Independent of [`expm5`].
pub fn exp_um_blocks(u: &TangentElement, dt: f64) -> (Mat3, Vec3, Vec3) {
    let phi = u.omega * dt;
    let rot = *Rotation::exp(&phi).matrix();
    let j = so3_left_jacobian(&phi);
    let n = so3_double_integral(&phi);
    let q = j * u.a_slot * dt;
    let p = j * u.v_slot * dt + n * u.a_slot * (u.kappa * dt * dt);
    (rot, p, q)
}

/// `sum_k [phi]x^k / (k+1)!`, so that `int_0^t exp([w]x s) ds = t J(w t)`.
pub fn so3_left_jacobian(phi: &Vec3) -> Mat3 {
    let theta = phi.norm();
    let k = skew(phi);
    let (b, c) = if theta < 1e-4 {
        let t2 = theta * theta;
        (0.5 - t2 / 24.0 + t2 * t2 / 720.0, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0)
    } else {
        let t2 = theta * theta;
        ((1.0 - theta.cos()) / t2, (theta - theta.sin()) / (t2 * theta))
    };
    Mat3::identity() + k * b + k * k * c
}

/// `sum_k [phi]x^k / (k+2)!`, so that the double integral
/// `int_0^t int_0^s exp([w]x r) dr ds = t^2 N(w t)`.
pub fn so3_double_integral(phi: &Vec3) -> Mat3 {
    let theta = phi.norm();
    let k = skew(phi);
    let (b, c) = if theta < 1e-3 {
        let t2 = theta * theta;
        (1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0, 1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0)
    } else {
        let t2 = theta * theta;
        ((theta - theta.sin()) / (t2 * theta), (0.5 * t2 + theta.cos() - 1.0) / (t2 * t2))
    };
    Mat3::identity() * 0.5 + k * b + k * k * c
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn vec3() -> impl Strategy<Value = Vec3> {
        (-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64).prop_map(|(a, b, c)| Vec3::new(a, b, c))
    }

    fn rotation() -> impl Strategy<Value = Rotation> {
        (vec3(), 0.0..std::f64::consts::PI).prop_map(|(axis, angle)| {
            if axis.norm() < 1e-3 {
                Rotation::identity()
            } else {
                Rotation::about_axis(&axis, angle)
            }
        })
    }

    fn nav_state() -> impl Strategy<Value = NavState> {
        (rotation(), vec3(), vec3()).prop_map(|(r, p, v)| NavState::new(r, p, v))
    }

    fn rodrigues(axis: Vec3, angle: f64) -> Mat3 {
        // Independent oracle: R = cos I + sin [n]x + (1 - cos) n n^T.
        let n = axis.normalize();
        Mat3::identity() * angle.cos() + skew(&n) * angle.sin() + n * n.transpose() * (1.0 - angle.cos())
    }

    #[test]
    fn skew_matches_displayed_form() {
        assert_eq!(skew(&Vec3::zeros()), Mat3::zeros());
        let s = skew(&Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(s.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, -3.0, 2.0]);
    }

    #[test]
    fn vex_rejects_symmetric_perturbation() {
        assert_eq!(vex(&Mat3::zeros()).unwrap(), Vec3::zeros());
        let x = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(vex(&skew(&x)).unwrap(), x);
        let mut m = skew(&x);
        m[(0, 1)] += 1e-3;
        m[(1, 0)] += 1e-3;
        assert!(matches!(vex(&m), Err(LieError::NotAntisymmetric(_))));
    }

    #[test]
    fn antisym_and_upsilon_basics() {
        assert_eq!(antisym_project(&Mat3::identity()), Mat3::zeros());
        let x = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(antisym_project(&skew(&x)), skew(&x));
        assert_eq!(upsilon(&skew(&x)), x);
        let sym = Mat3::new(1.0, 2.0, 3.0, 2.0, 5.0, 6.0, 3.0, 6.0, 9.0);
        assert_eq!(upsilon(&sym), Vec3::zeros());
    }

    #[test]
    fn attitude_distance_reference_values() {
        assert_eq!(attitude_distance(&Rotation::identity()), 0.0);
        let flip = Rotation::new(Mat3::from_diagonal(&Vec3::new(1.0, -1.0, -1.0))).unwrap();
        assert_eq!(attitude_distance(&flip), 1.0);
        let quarter = Rotation::about_axis(&Vec3::z(), std::f64::consts::FRAC_PI_2);
        assert_relative_eq!(attitude_distance(&quarter), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn nav_inverse_and_identity() {
        let id = NavState::identity();
        assert_eq!(id.inverse(), id);
        let x = NavState::new(
            Rotation::about_axis(&Vec3::new(1.0, -2.0, 0.5), 1.1),
            Vec3::new(1.0, 2.0, 3.0),
            Vec3::new(-0.5, 0.1, 0.7),
        );
        assert_eq!(x.compose(&id), x);
        let e = x.compose(&x.inverse()).to_matrix() - Mat5::identity();
        assert!(e.norm() < 1e-12);
        let xx = x.inverse().inverse();
        assert!((xx.to_matrix() - x.to_matrix()).norm() < 1e-14);
    }

    #[test]
    fn from_matrix_checks_bottom_rows() {
        let mut m = Mat5::identity();
        assert!(NavState::from_matrix(&m).is_ok());
        m[(4, 3)] = 1e-3;
        assert_eq!(NavState::from_matrix(&m), Err(LieError::NotNavMatrix));
    }

    #[test]
    fn exp_um_zero_and_nilpotent_cases() {
        assert_eq!(exp_um(&TangentElement::zero(), 0.3), Mat5::identity());

        let dt = 0.1;
        let e = exp_um(&TangentElement::new(Vec3::zeros(), Vec3::zeros(), Vec3::zeros(), 1.0), dt);
        let mut expected = Mat5::identity();
        expected[(4, 3)] = dt;
        assert_eq!(e, expected);
        let x = NavState::new(Rotation::identity(), Vec3::new(1.0, 2.0, 3.0), Vec3::new(1.0, 0.0, -1.0));
        let y = x.to_matrix() * e;
        let p: Vec3 = y.fixed_view::<3, 1>(0, 3).into_owned();
        assert_relative_eq!(p, x.position + x.velocity * dt, epsilon = 1e-15);

        let a = Vec3::new(1.0, -2.0, 0.5);
        let e = exp_um(&TangentElement::new(Vec3::zeros(), Vec3::zeros(), a, 1.0), dt);
        let q: Vec3 = e.fixed_view::<3, 1>(0, 4).into_owned();
        let p: Vec3 = e.fixed_view::<3, 1>(0, 3).into_owned();
        assert_relative_eq!(q, a * dt, epsilon = 1e-15);
        assert_relative_eq!(p, a * (dt * dt / 2.0), epsilon = 1e-15);
    }

    #[test]
    fn exp_um_rotation_block_matches_rodrigues() {
        let w = Vec3::new(0.3, -1.2, 2.0);
        let dt = 0.7;
        let e = exp_um(&TangentElement::new(w, Vec3::zeros(), Vec3::zeros(), 0.0), dt);
        let r: Mat3 = e.fixed_view::<3, 3>(0, 0).into_owned();
        assert!((r - rodrigues(w, w.norm() * dt)).norm() < 1e-13);
    }

    #[test]
    fn quat_to_rot_reference_cases() {
        assert_eq!(*quat_to_rot(&Quaternion::identity()).unwrap().matrix(), Mat3::identity());
        let theta: f64 = 0.83;
        let q = Quaternion::new((theta / 2.0).cos(), 0.0, 0.0, (theta / 2.0).sin());
        let r = quat_to_rot(&q).unwrap();
        assert!((r.matrix() - rodrigues(Vec3::z(), theta)).norm() < 1e-14);
        let neg = Quaternion { w: -q.w, v: -q.v };
        assert!((quat_to_rot(&neg).unwrap().matrix() - r.matrix()).norm() < 1e-15);
        assert!(matches!(
            quat_to_rot(&Quaternion::new(1.0 + 1e-5, 0.0, 0.0, 0.0)),
            Err(LieError::NotUnitQuaternion(_))
        ));
    }

    #[test]
    fn rot_to_quat_reference_cases() {
        assert_eq!(rot_to_quat(&Rotation::identity()), Quaternion::identity());
        let flip = Rotation::new(Mat3::from_diagonal(&Vec3::new(1.0, -1.0, -1.0))).unwrap();
        let q = rot_to_quat(&flip);
        assert_relative_eq!(q.w, 0.0, epsilon = 1e-15);
        assert_relative_eq!(q.v, Vec3::x(), epsilon = 1e-15);
    }

    #[test]
    fn reorthonormalize_cases() {
        let r = Rotation::about_axis(&Vec3::new(1.0, 1.0, 0.0), 0.4);
        let back = reorthonormalize(r.matrix()).unwrap();
        assert!((back.matrix() - r.matrix()).norm() < 1e-14);

        let scaled = reorthonormalize(&(r.matrix() * 1.001)).unwrap();
        assert!((scaled.matrix() - r.matrix()).norm() < 1e-9);

        let mut perturbed = *r.matrix();
        perturbed[(0, 1)] += 1e-6;
        let p = reorthonormalize(&perturbed).unwrap();
        assert!((p.matrix() - r.matrix()).norm() < 2e-6);
        assert!(Rotation::new(*p.matrix()).is_ok());

        assert!(matches!(
            reorthonormalize(&(r.matrix() * 1.2)),
            Err(LieError::TooFarFromRotation(_))
        ));
    }

    #[test]
    fn closed_form_blocks_match_dense_exponential() {
        let u = TangentElement::new(
            Vec3::new(0.4, -0.9, 1.3),
            Vec3::new(0.2, 0.1, -0.3),
            Vec3::new(-1.0, 2.0, 9.0),
            1.0,
        );
        for dt in [1e-4, 5e-3, 0.1, 1.0] {
            let dense = exp_um(&u, dt);
            let (rot, p, q) = exp_um_blocks(&u, dt);
            assert!((dense.fixed_view::<3, 3>(0, 0) - rot).norm() < 1e-13);
            assert!((dense.fixed_view::<3, 1>(0, 3) - p).norm() < 1e-13);
            assert!((dense.fixed_view::<3, 1>(0, 4) - q).norm() < 1e-13);
        }
    }

    proptest! {
        #[test]
        fn vex_skew_round_trip(x in vec3()) {
            prop_assert_eq!(vex(&skew(&x)).unwrap(), x);
            let y = Vec3::new(0.3, -0.7, 1.1);
            prop_assert!((skew(&x) * y - x.cross(&y)).norm() < 1e-12);
        }

        #[test]
        fn antisym_projection_identities(m in proptest::array::uniform9(-3.0..3.0f64)) {
            let m = Mat3::from_row_slice(&m);
            let p = antisym_project(&m);
            prop_assert_eq!(antisym_project(&p), p);
            prop_assert!((p + antisym_project(&m.transpose())).norm() < 1e-15);
        }

        #[test]
        fn attitude_distance_frobenius_identity(r in rotation()) {
            let d = attitude_distance(&r);
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&d));
            let f = (Mat3::identity() - r.matrix()).norm_squared() / 8.0;
            prop_assert!((d - f).abs() < 1e-9);
        }

        #[test]
        fn compose_matches_dense_product(a in nav_state(), b in nav_state()) {
            let lhs = a.compose(&b).to_matrix();
            let rhs = a.to_matrix() * b.to_matrix();
            prop_assert!((lhs - rhs).norm() < 1e-12);
            let inv = a.inverse().to_matrix() * a.to_matrix() - Mat5::identity();
            prop_assert!(inv.norm() < 1e-12);
        }

        #[test]
        fn exp_um_one_parameter_group(
            w in vec3(), v in vec3(), a in vec3(), kappa in -1.0..1.0f64,
            s in 0.0..0.1f64, t in 0.0..0.1f64,
        ) {
            let u = TangentElement::new(w, v, a, kappa);
            let lhs = exp_um(&u, s + t);
            let rhs = exp_um(&u, s) * exp_um(&u, t);
            prop_assert!((lhs - rhs).norm() <= 1e-10 * lhs.norm());
        }

        #[test]
        fn quaternion_homomorphism(a in vec3(), b in vec3()) {
            let qa = Quaternion::from_rotation_vector(&a);
            let qb = Quaternion::from_rotation_vector(&b);
            let lhs = quat_to_rot(&(qa * qb)).unwrap();
            let rhs = quat_to_rot(&qa).unwrap() * quat_to_rot(&qb).unwrap();
            prop_assert!((lhs.matrix() - rhs.matrix()).norm() < 1e-9);
        }

        #[test]
        fn rot_quat_round_trip(r in rotation()) {
            let q = rot_to_quat(&r);
            prop_assert!(q.w >= 0.0);
            prop_assert!((q.norm() - 1.0).abs() < 1e-12);
            let back = quat_to_rot(&q).unwrap();
            prop_assert!((back.matrix() - r.matrix()).norm() < 1e-9);
        }
    }
}
