//! Wheel-contact constraint stabilization shared by the plant simulator and
//! the NMPC prediction model.
//!
//! Under contact the wheel axle (body y) rigidly resists three motions:
//! vertical CoM motion (height pinned at the wheel radius), lateral slip
//! along the axle (body-y velocity) and roll about body x. The reaction
//! wrench is the unique CoM wrench that drives those coordinates with
//! critically damped Baumgarte feedback:
//!
//!   v̇_z      = −k_p (p_z − r) − k_d v_z        (inertial z)
//!   d(v_By)/dt = −k_d v_By                      (body y)
//!   ω̇_x      = −k_d ω_x                         (body x)
//!
//! The simulator layers the unilateral conditions (N ≥ 0, |f_y| ≤ μN) on
//! top; the prediction model applies the feedback unconditionally on
//! contact-gated stages.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::math::{rotate_inv, Quat, Vec3};
use crate::types::RigidBodyState;

/// Baumgarte gains; defaults are critically damped (k_d = 2√k_p).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContactGains {
    /// Position feedback on the height constraint [1/s²].
    pub kp: f64,
    /// Velocity feedback on all three constraints [1/s].
    pub kd: f64,
}

impl Default for ContactGains {
    fn default() -> Self {
        Self { kp: 400.0, kd: 40.0 }
    }
}

/// Reaction solved by [`constrained_accels`].
#[derive(Debug, Clone, Copy)]
pub struct ContactSolution {
    /// Corrected inertial CoM acceleration [m/s²].
    pub accel: Vec3,
    /// Corrected body angular acceleration [rad/s²].
    pub ang_accel: Vec3,
    /// Normal force along inertial z [N] (may be negative; caller decides).
    pub normal_force: f64,
    /// Lateral force along the body-y axis direction [N].
    pub lateral_force: f64,
    /// Reaction torque about body x [N·m].
    pub roll_torque: f64,
}

/// Solves the reaction that meets the three constraint-feedback targets given
/// the unconstrained accelerations, treating all forces as applied at the CoM.
///
/// `accel_free` is the inertial CoM acceleration and `ang_accel_free` the
/// body angular acceleration the applied wrench plus gravity would produce
/// without ground contact.
pub fn constrained_accels(
    body: &RigidBodyState,
    accel_free: &Vec3,
    ang_accel_free: &Vec3,
    mass: f64,
    inertia_inv: &Matrix3<f64>,
    wheel_radius: f64,
    gains: &ContactGains,
) -> ContactSolution {
    let ch = solve_force_channels(body, accel_free, wheel_radius, gains);
    let accel = accel_free + Vec3::z() * ch.alpha + ch.y_world * ch.beta;

    let (tau_x, ang_accel) = solve_roll_channel(body, ang_accel_free, inertia_inv, gains);

    ContactSolution {
        accel,
        ang_accel,
        normal_force: mass * ch.alpha,
        lateral_force: mass * ch.beta,
        roll_torque: tau_x,
    }
}

/// Per-unit-mass force-channel solution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ForceChannels {
    /// Correction along inertial z [m/s²].
    pub alpha: f64,
    /// Correction along the body-y world direction [m/s²].
    pub beta: f64,
    /// Body-y axis in the inertial frame.
    pub y_world: Vec3,
    /// Height-channel acceleration target [m/s²].
    pub t_z: f64,
}

/// Force channels: per-unit-mass corrections (α along inertial z, β along
/// the body-y direction) meeting the height and lateral targets.
pub(crate) fn solve_force_channels(
    body: &RigidBodyState,
    accel_free: &Vec3,
    wheel_radius: f64,
    gains: &ContactGains,
) -> ForceChannels {
    let y_world = crate::math::rotate(&body.q, &Vec3::y());
    let v_body = rotate_inv(&body.q, &body.v);

    let t_z = -gains.kp * (body.p.z - wheel_radius) - gains.kd * body.v.z;
    // d(v_By)/dt = y_wᵀ a − (ω × v_B)_y, so the accel target absorbs the
    // transport term.
    let t_y = -gains.kd * v_body.y + body.omega.cross(&v_body).y;

    let c = y_world.z;
    let det = 1.0 - c * c;
    let rz = t_z - accel_free.z;
    let ry = t_y - y_world.dot(accel_free);
    if det < 1e-6 {
        // Axle nearly vertical: lateral channel degenerate, keep normal only.
        return ForceChannels { alpha: rz, beta: 0.0, y_world, t_z };
    }
    ForceChannels {
        alpha: (rz - c * ry) / det,
        beta: (ry - c * rz) / det,
        y_world,
        t_z,
    }
}

/// Roll channel: reaction torque about body x meeting ω̇_x = −k_d ω_x.
pub(crate) fn solve_roll_channel(
    body: &RigidBodyState,
    ang_accel_free: &Vec3,
    inertia_inv: &Matrix3<f64>,
    gains: &ContactGains,
) -> (f64, Vec3) {
    let target = -gains.kd * body.omega.x;
    let jinv_xx = inertia_inv[(0, 0)];
    let tau_x = (target - ang_accel_free.x) / jinv_xx;
    let ang_accel = ang_accel_free + inertia_inv * Vec3::new(tau_x, 0.0, 0.0);
    (tau_x, ang_accel)
}

/// Body-y axis direction in the inertial frame.
pub fn axle_direction_world(q: &Quat) -> Vec3 {
    crate::math::rotate(q, &Vec3::y())
}
