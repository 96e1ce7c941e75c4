//! Quaternion kinematics used across the vehicle model, simulator and
//! controller.
//!
//! Convention (fixed project-wide): quaternions are scalar-first `(w, x, y, z)`
//! and rotate body-frame vectors into the inertial ENU frame. Storage is
//! `nalgebra::Quaternion` (which prints as `w + xi + yj + zk`); all public
//! helpers assume and preserve unit norm.

use nalgebra::{Quaternion, Vector3};

use crate::error::Error;

pub type Vec3 = Vector3<f64>;
pub type Quat = Quaternion<f64>;

/// Unit-norm tolerance accepted on inputs to the checked operations.
pub const QUAT_UNIT_TOL: f64 = 1e-6;

fn check_unit(q: &Quat, what: &str) -> Result<(), Error> {
    let n = q.norm();
    if !n.is_finite() || (n - 1.0).abs() > QUAT_UNIT_TOL {
        return Err(Error::InvalidArgument(format!(
            "{what}: quaternion norm {n:.9} is not unit within {QUAT_UNIT_TOL:e}"
        )));
    }
    Ok(())
}

/// Rotates `v` by the unit quaternion `q` (body into inertial frame).
///
/// Errors if `q` is not unit within [`QUAT_UNIT_TOL`].
pub fn quat_rotate(q: &Quat, v: &Vec3) -> Result<Vec3, Error> {
    check_unit(q, "quat_rotate")?;
    Ok(rotate(q, v))
}

/// Unchecked rotation of `v` by `q`. Callers guarantee unit norm.
#[inline]
pub fn rotate(q: &Quat, v: &Vec3) -> Vec3 {
    // v' = v + 2w(u×v) + 2u×(u×v) with u the vector part.
    let u = q.imag();
    let t = u.cross(v) * 2.0;
    v + q.w * t + u.cross(&t)
}

/// Rotates `v` by the inverse of `q` (inertial into body frame).
#[inline]
pub fn rotate_inv(q: &Quat, v: &Vec3) -> Vec3 {
    rotate(&q.conjugate(), v)
}

/// Quaternion rate q̇ = ½ q ⊗ (0, ω) for a body-frame angular velocity ω.
pub fn quat_derivative(q: &Quat, omega: &Vec3) -> Result<Quat, Error> {
    check_unit(q, "quat_derivative")?;
    Ok(derivative(q, omega))
}

/// Unchecked quaternion rate.
#[inline]
pub fn derivative(q: &Quat, omega: &Vec3) -> Quat {
    let omega_q = Quat::from_parts(0.0, *omega);
    (q * omega_q) * 0.5
}

/// Attitude error q ⊗ q_ref⁻¹ with the scalar part forced nonnegative so the
/// double cover collapses to the minimal rotation.
pub fn quat_error(q: &Quat, q_ref: &Quat) -> Result<Quat, Error> {
    check_unit(q, "quat_error")?;
    check_unit(q_ref, "quat_error (reference)")?;
    let mut e = q * q_ref.conjugate();
    if e.w < 0.0 {
        e = -e;
    }
    Ok(e)
}

/// Quaternion exponential of a rotation vector: exp(θ) with ‖θ‖ the rotation
/// angle about θ/‖θ‖. Returns a unit quaternion; exact at θ = 0.
pub fn quat_exp(theta: &Vec3) -> Quat {
    let half = 0.5 * theta.norm();
    if half < 1e-12 {
        // sin(x)/x → 1; first-order term keeps the map smooth through zero.
        let v = theta * 0.5;
        Quat::from_parts(1.0 - 0.5 * half * half, v).normalize()
    } else {
        let axis = theta / theta.norm();
        Quat::from_parts(half.cos(), axis * half.sin())
    }
}

/// Rotation vector of a unit quaternion: inverse of [`quat_exp`]. The sign
/// ambiguity resolves to the rotation with angle in [0, π].
pub fn quat_log(q: &Quat) -> Vec3 {
    let q = if q.w < 0.0 { -*q } else { *q };
    let vn = q.imag().norm();
    if vn < 1e-12 {
        q.imag() * 2.0
    } else {
        let angle = 2.0 * vn.atan2(q.w);
        q.imag() * (angle / vn)
    }
}

/// Yaw-only quaternion (rotation about inertial z).
pub fn quat_from_yaw(yaw: f64) -> Quat {
    let h = 0.5 * yaw;
    Quat::from_parts(h.cos(), Vec3::new(0.0, 0.0, h.sin()))
}

/// Normalizes in place, failing on zero or non-finite quaternions.
pub fn renormalize(q: &mut Quat) -> Result<(), Error> {
    let n = q.norm();
    if !n.is_finite() || n < 1e-12 {
        return Err(Error::NonFinite("quaternion norm collapsed".into()));
    }
    *q /= n;
    Ok(())
}
