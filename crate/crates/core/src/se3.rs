//! Rotation and rigid-body helpers.
//!
//! Conventions used everywhere in this crate:
//!
//! * Quaternions are Hamilton quaternions (`nalgebra::UnitQuaternion`), and
//!   `q_a^b` rotates vectors from frame `a` into frame `b`.
//! * When a quaternion is flattened into a parameter vector the order is
//!   `[w, x, y, z]`; see [`quat_to_array`] and [`quat_from_array`].
//! * Attitude errors are right perturbations in the body frame:
//!   `R_true = R_est * exp([dphi]x)`.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use thiserror::Error;

pub type Quat = UnitQuaternion<f64>;

const SMALL_ANGLE: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Se3Error {
    #[error("interpolation time {t} outside [{t0}, {t1}]")]
    OutOfRange { t: f64, t0: f64, t1: f64 },
    #[error("degenerate interpolation interval [{t0}, {t1}]")]
    EmptyInterval { t0: f64, t1: f64 },
}

/// Skew-symmetric matrix such that `skew(v) * u == v.cross(&u)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues' formula, with a second-order series for tiny angles.
pub fn exp_so3(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < SMALL_ANGLE {
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    let t2 = theta * theta;
    Matrix3::identity() + (theta.sin() / theta) * k + ((1.0 - theta.cos()) / t2) * k * k
}

/// Rotation vector of a rotation matrix, magnitude in `[0, pi]`.
pub fn log_so3(r: &Matrix3<f64>) -> Vector3<f64> {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
    quat_log(&q)
}

pub fn quat_exp(phi: &Vector3<f64>) -> Quat {
    let theta = phi.norm();
    if theta < SMALL_ANGLE {
        let h = 0.5 * phi;
        return UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(1.0, h.x, h.y, h.z));
    }
    let half = 0.5 * theta;
    let s = half.sin() / theta;
    UnitQuaternion::new_unchecked(nalgebra::Quaternion::new(
        half.cos(),
        s * phi.x,
        s * phi.y,
        s * phi.z,
    ))
}

/// Rotation vector of a quaternion. The double cover is resolved towards the
/// short rotation (`w >= 0`).
pub fn quat_log(q: &Quat) -> Vector3<f64> {
    let q = canonical(q);
    let v = q.imag();
    let n = v.norm();
    let w = q.w;
    if n < SMALL_ANGLE {
        // atan(n/w) ~ n/w for tiny n
        return 2.0 * v / w;
    }
    2.0 * n.atan2(w) * v / n
}

/// Flips the sign so that `w >= 0`.
pub fn canonical(q: &Quat) -> Quat {
    if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        *q
    }
}

pub fn quat_mul(a: &Quat, b: &Quat) -> Quat {
    UnitQuaternion::new_normalize(a.into_inner() * b.into_inner())
}

pub fn quat_to_array(q: &Quat) -> [f64; 4] {
    [q.w, q.i, q.j, q.k]
}

pub fn quat_from_array(a: &[f64]) -> Quat {
    UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(a[0], a[1], a[2], a[3]))
}

/// Right Jacobian of SO(3): `exp(phi + d) ~ exp(phi) exp(Jr(phi) d)`.
pub fn right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < 1e-5 {
        return Matrix3::identity() - 0.5 * k + k * k / 6.0;
    }
    let t2 = theta * theta;
    Matrix3::identity() - ((1.0 - theta.cos()) / t2) * k + ((theta - theta.sin()) / (t2 * theta)) * k * k
}

pub fn right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < 1e-5 {
        return Matrix3::identity() + 0.5 * k + k * k / 12.0;
    }
    let t2 = theta * theta;
    let c = 1.0 / t2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Matrix3::identity() + 0.5 * k + c * k * k
}

/// ZYX Euler angles `(roll, pitch, yaw)` to a quaternion.
pub fn quat_from_euler(roll: f64, pitch: f64, yaw: f64) -> Quat {
    UnitQuaternion::from_euler_angles(roll, pitch, yaw)
}

/// ZYX Euler angles `(roll, pitch, yaw)` of a quaternion.
pub fn euler_from_quat(q: &Quat) -> Vector3<f64> {
    let (r, p, y) = q.euler_angles();
    Vector3::new(r, p, y)
}

/// Maps body-frame attitude perturbations to ZYX Euler angle perturbations,
/// `d(roll, pitch, yaw) = M * dphi`.
pub fn euler_rate_matrix(roll: f64, pitch: f64) -> Matrix3<f64> {
    let (sr, cr) = roll.sin_cos();
    let (tp, cp) = (pitch.tan(), pitch.cos());
    Matrix3::new(
        1.0,
        sr * tp,
        cr * tp,
        0.0,
        cr,
        -sr,
        0.0,
        sr / cp,
        cr / cp,
    )
}

/// Rigid transform `x_parent = rotation * x_child + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub translation: Vector3<f64>,
    pub rotation: Quat,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(translation: Vector3<f64>, rotation: Quat) -> Self {
        Self {
            translation,
            rotation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Vector3::zeros(), Quat::identity())
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse_transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse() * (p - self.translation)
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.translation + self.translation,
            quat_mul(&self.rotation, &other.rotation),
        )
    }

    pub fn inverse(&self) -> Pose {
        let r = self.rotation.inverse();
        Pose::new(-(r * self.translation), r)
    }

    /// Relative transform `self^-1 * other`.
    pub fn between(&self, other: &Pose) -> Pose {
        self.inverse().compose(other)
    }
}

/// Interpolates between two timestamped poses: linear in translation and
/// spherical-linear in rotation. Extrapolation is refused.
pub fn pose_interpolate(p0: &Pose, t0: f64, p1: &Pose, t1: f64, t: f64) -> Result<Pose, Se3Error> {
    if !(t1 > t0) {
        return Err(Se3Error::EmptyInterval { t0, t1 });
    }
    if t < t0 || t > t1 {
        return Err(Se3Error::OutOfRange { t, t0, t1 });
    }
    let s = (t - t0) / (t1 - t0);
    Ok(interpolate_fraction(p0, p1, s))
}

pub(crate) fn interpolate_fraction(p0: &Pose, p1: &Pose, s: f64) -> Pose {
    let translation = p0.translation + s * (p1.translation - p0.translation);
    let delta = quat_log(&(p0.rotation.inverse() * p1.rotation));
    let rotation = quat_mul(&p0.rotation, &quat_exp(&(s * delta)));
    Pose::new(translation, rotation)
}
