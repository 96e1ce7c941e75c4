//! Shared state and wrench value types.

use nalgebra::Vector6;

use crate::error::Error;
use crate::math::{renormalize, Quat, Vec3};

/// Pose and twist of the vehicle.
///
/// `p`, `v` in the inertial ENU frame; `q` rotates body into inertial;
/// `omega` is the body-frame angular velocity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidBodyState {
    /// Position of the CoM [m], inertial frame.
    pub p: Vec3,
    /// Velocity of the CoM [m/s], inertial frame.
    pub v: Vec3,
    /// Body-to-inertial attitude quaternion, unit norm.
    pub q: Quat,
    /// Angular velocity [rad/s], body frame.
    pub omega: Vec3,
}

impl RigidBodyState {
    /// Builds a state, normalizing `q` and rejecting non-finite components.
    pub fn new(p: Vec3, v: Vec3, q: Quat, omega: Vec3) -> Result<Self, Error> {
        let mut q = q;
        renormalize(&mut q)?;
        let s = Self { p, v, q, omega };
        s.check_finite()?;
        Ok(s)
    }

    /// State at rest at a position, identity attitude.
    pub fn at_rest(p: Vec3) -> Self {
        Self {
            p,
            v: Vec3::zeros(),
            q: Quat::identity(),
            omega: Vec3::zeros(),
        }
    }

    pub fn check_finite(&self) -> Result<(), Error> {
        let ok = self.p.iter().all(|x| x.is_finite())
            && self.v.iter().all(|x| x.is_finite())
            && self.q.coords.iter().all(|x| x.is_finite())
            && self.omega.iter().all(|x| x.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::NonFinite("rigid body state".into()))
        }
    }
}

impl Default for RigidBodyState {
    fn default() -> Self {
        Self::at_rest(Vec3::zeros())
    }
}

/// Body-frame force/torque pair. Also reused for external wrench estimates
/// and wrench rates.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Wrench {
    /// Force [N], body frame.
    pub force: Vec3,
    /// Torque [N·m], body frame.
    pub torque: Vec3,
}

impl Wrench {
    pub fn new(force: Vec3, torque: Vec3) -> Self {
        Self { force, torque }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_vector6(w: &Vector6<f64>) -> Self {
        Self {
            force: Vec3::new(w[0], w[1], w[2]),
            torque: Vec3::new(w[3], w[4], w[5]),
        }
    }

    pub fn as_vector6(&self) -> Vector6<f64> {
        Vector6::new(
            self.force.x,
            self.force.y,
            self.force.z,
            self.torque.x,
            self.torque.y,
            self.torque.z,
        )
    }

    pub fn is_finite(&self) -> bool {
        self.force.iter().all(|x| x.is_finite()) && self.torque.iter().all(|x| x.is_finite())
    }
}

impl std::ops::Add for Wrench {
    type Output = Wrench;
    fn add(self, rhs: Wrench) -> Wrench {
        Wrench {
            force: self.force + rhs.force,
            torque: self.torque + rhs.torque,
        }
    }
}

impl std::ops::Sub for Wrench {
    type Output = Wrench;
    fn sub(self, rhs: Wrench) -> Wrench {
        Wrench {
            force: self.force - rhs.force,
            torque: self.torque - rhs.torque,
        }
    }
}

/// Actuator state: rotor speeds plus actual and commanded tilt angles.
///
/// Tilt angles follow the allocation convention: α = π/2 points the rotor
/// thrust along body +z (hover), α = 0 along the arm's tangential direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActuatorState {
    /// Rotor angular speeds [rad/s], nonnegative.
    pub rotor_speeds: [f64; 4],
    /// Actual servo tilt angles [rad].
    pub tilt_angles: [f64; 4],
    /// Commanded servo tilt angles [rad].
    pub tilt_cmds: [f64; 4],
}

impl ActuatorState {
    pub fn at_rest() -> Self {
        // Rotors parked pointing up.
        Self {
            rotor_speeds: [0.0; 4],
            tilt_angles: [std::f64::consts::FRAC_PI_2; 4],
            tilt_cmds: [std::f64::consts::FRAC_PI_2; 4],
        }
    }
}

/// Commands produced by the allocation stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActuatorCommands {
    /// Rotor speed commands [rad/s].
    pub rotor_speeds: [f64; 4],
    /// Servo tilt commands [rad].
    pub tilt_angles: [f64; 4],
}

impl ActuatorCommands {
    pub fn zero_thrust() -> Self {
        Self {
            rotor_speeds: [0.0; 4],
            tilt_angles: [std::f64::consts::FRAC_PI_2; 4],
        }
    }
}
